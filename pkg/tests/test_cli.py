import json
from pathlib import Path

import pytest

from scenecomp import cli
from scenecomp import synthdata as sd

STEPS = "6"


def run(*argv) -> int:
    return cli.main([str(a) for a in argv])


def tree_bytes(root: Path) -> dict:
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run("gen-data", "--out", root / "data", "--num", 12, "--seed", 4) == 0
    (root / "cfg.json").write_text(json.dumps({"steps": 20, "batch_size": 4, "log_every": 5, "lr": 1e-3}))
    assert run("train", "--config", root / "cfg.json", "--data", root / "data", "--out", root / "m.ckpt") == 0
    return root


def test_parser_defaults():
    a = cli.build_parser().parse_args(["sample", "--ckpt", "c", "--graph", "g", "--out", "o"])
    assert (a.steps, a.cfg, a.nl, a.mls) == (50, 7.5, 5, "on")


def test_gen_data_is_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert run("gen-data", "--out", tmp_path / name, "--num", 5, "--seed", 9) == 0
    a, b = tree_bytes(tmp_path / "a"), tree_bytes(tmp_path / "b")
    assert a == b and len(a) == 11


def test_train_is_byte_identical(work, tmp_path):
    assert run("train", "--config", work / "cfg.json", "--data", work / "data", "--out", tmp_path / "m.ckpt") == 0
    assert (tmp_path / "m.ckpt").read_bytes() == (work / "m.ckpt").read_bytes()


@pytest.mark.parametrize("mls", ["on", "off"])
def test_sample_is_byte_identical(work, tmp_path, mls):
    graph = work / "data" / "scenes" / "0003.json"
    for name in ("a", "b"):
        assert run("sample", "--ckpt", work / "m.ckpt", "--graph", graph, "--seed", 2, "--steps", STEPS,
                   "--nl", 2, "--mls", mls, "--out", tmp_path / f"{name}.ppm") == 0
    assert (tmp_path / "a.ppm").read_bytes() == (tmp_path / "b.ppm").read_bytes()
    assert (tmp_path / "a.ppm.seed.json").read_bytes() == (tmp_path / "b.ppm.seed.json").read_bytes()
    assert sd.read_ppm(tmp_path / "a.ppm").shape == (16, 16, 3)


@pytest.fixture(scope="module")
def sampled(work):
    graph = work / "data" / "scenes" / "0001.json"
    out = work / "s.ppm"
    assert run("sample", "--ckpt", work / "m.ckpt", "--graph", graph, "--seed", 7, "--steps", STEPS,
               "--nl", 3, "--out", out) == 0
    return graph, out


def test_identity_edit_reproduces_sample(work, sampled, tmp_path):
    graph, out = sampled
    color = json.loads(graph.read_text())["nodes"][0]["attributes"][0]
    node = json.loads(graph.read_text())["nodes"][0]["id"]
    assert run("edit", "--ckpt", work / "m.ckpt", "--graph", graph, "--state", str(out) + ".seed.json",
               "--edit", f"set-attr {node} {color}", "--out", tmp_path / "e.ppm", "--before", tmp_path / "b.ppm") == 0
    assert (tmp_path / "e.ppm").read_bytes() == out.read_bytes()
    assert (tmp_path / "b.ppm").read_bytes() == out.read_bytes()


@pytest.mark.parametrize("edit", ["set-attr {node} blue", "add-node circle left of {node}"])
def test_edit_is_byte_identical(work, sampled, tmp_path, edit):
    graph, out = sampled
    node = json.loads(graph.read_text())["nodes"][0]["id"]
    for name in ("a", "b"):
        assert run("edit", "--ckpt", work / "m.ckpt", "--graph", graph, "--state", str(out) + ".seed.json",
                   "--edit", edit.format(node=node), "--out", tmp_path / f"{name}.ppm") == 0
    for suffix in ("", ".seed.json", ".graph.json"):
        assert (tmp_path / f"a.ppm{suffix}").read_bytes() == (tmp_path / f"b.ppm{suffix}").read_bytes()


def test_edit_does_not_touch_inputs(work, sampled, tmp_path):
    graph, out = sampled
    state = Path(str(out) + ".seed.json")
    before = (graph.read_bytes(), state.read_bytes())
    node = json.loads(graph.read_text())["nodes"][0]["id"]
    assert run("edit", "--ckpt", work / "m.ckpt", "--graph", graph, "--state", state,
               "--edit", f"set-attr {node} red", "--out", tmp_path / "e.ppm") == 0
    assert (graph.read_bytes(), state.read_bytes()) == before


def test_eval_report(work, tmp_path):
    report = tmp_path / "r.json"
    assert run("eval", "--ckpt", work / "m.ckpt", "--data", work / "data", "--report", report,
               "--steps", 3, "--limit", 3) == 0
    doc = json.loads(report.read_text())
    assert {"layout_iou", "attr_acc", "count_acc", "loss_curve"} <= set(doc)
    assert [row["step"] for row in doc["loss_curve"]] == [5, 10, 15, 20]


def test_eval_masks_command(tmp_path, capsys):
    assert run("eval-masks", "--num", 50, "--passes", 3, "--report", tmp_path / "m.json") == 0
    assert json.loads((tmp_path / "m.json").read_text())["passed"] is True


def test_exit_codes(work, sampled, tmp_path, capsys):
    graph, out = sampled
    ckpt = work / "m.ckpt"
    assert run("sample", "--ckpt", ckpt, "--graph", graph, "--out", tmp_path / "x.ppm", "--bogus") == 3
    assert run("frobnicate") == 3
    assert run("sample", "--ckpt", tmp_path / "none.ckpt", "--graph", graph, "--out", tmp_path / "x.ppm") == 2
    assert run("train", "--config", tmp_path / "none.json", "--data", work / "data", "--out", tmp_path / "x") == 2
    bad = tmp_path / "bad.json"
    bad.write_text('{"nodes": [{"id": "a", "category": "hexagon"}], "edges": []}')
    assert run("sample", "--ckpt", ckpt, "--graph", bad, "--out", tmp_path / "x.ppm") == 3
    bad.write_text("{not json")
    assert run("sample", "--ckpt", ckpt, "--graph", bad, "--out", tmp_path / "x.ppm") == 3
    cfg = tmp_path / "cfg.json"
    cfg.write_text('{"stepz": 3}')
    assert run("train", "--config", cfg, "--data", work / "data", "--out", tmp_path / "x") == 3
    junk = tmp_path / "junk.ckpt"
    junk.write_bytes(b"nonsense")
    assert run("sample", "--ckpt", junk, "--graph", graph, "--out", tmp_path / "x.ppm") == 3
    other = work / "data" / "scenes" / "0002.json"
    assert run("edit", "--ckpt", ckpt, "--graph", other, "--state", str(out) + ".seed.json",
               "--edit", "set-attr o0 red", "--out", tmp_path / "x.ppm") == 3
    assert run("edit", "--ckpt", ckpt, "--graph", graph, "--state", str(out) + ".seed.json",
               "--edit", "paint o0 red", "--out", tmp_path / "x.ppm") == 3
    assert not (tmp_path / "x.ppm").exists()
    err = capsys.readouterr().err
    assert "no such file" in err and "error:" in err
