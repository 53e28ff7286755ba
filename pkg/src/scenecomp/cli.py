"""Command line: gen-data, train, sample, edit, eval, check-grad, eval-masks.

Exit codes: 0 success, 1 internal error or failed self-check, 2 missing
file, 3 invalid input (bad flags, graph, config, checkpoint or sidecar).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import audit, mls, pipeline
from . import cmadiff as cd
from . import synthdata as sd
from .model import ModelBackend, ModelConfig, SceneDiffusionModel
from .scenegraph import SceneGraphError, parse_edit, to_dict
from .tensorcore import Rng
from .trainer import CheckpointError, TrainConfig, Trainer, gradient_audit
from .validation import ValidationError, check_graph, check_seed, load_json_file

EXIT_OK, EXIT_INTERNAL, EXIT_MISSING, EXIT_INVALID = 0, 1, 2, 3

log = logging.getLogger("scenecomp")


class UsageError(Exception):
    pass


class CheckFailed(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _write_json(path, doc) -> None:
    sd.atomic_write(path, (json.dumps(doc, indent=1, sort_keys=True) + "\n").encode("utf-8"))


def _require(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"no such file or directory: {p}")
    return p


def _load_trainer(path) -> Trainer:
    return Trainer.from_checkpoint(_require(path))


def _load_graph(path, vocab):
    return check_graph(_require(path).read_bytes(), vocab)


def _sidecar_path(out, explicit) -> Path:
    return Path(explicit) if explicit else Path(str(out) + ".seed.json")


# -- commands ------------------------------------------------------------------------

def cmd_gen_data(a) -> dict:
    if a.num < 0:
        raise ValidationError("--num must be non-negative")
    out = sd.write_dataset(a.out, a.num, check_seed(a.seed))
    return {"out": str(out), "num_scenes": a.num, "seed": a.seed}


def cmd_train(a) -> dict:
    doc = load_json_file(_require(a.config))
    if not isinstance(doc, dict):
        raise ValidationError("config must be a JSON object")
    try:
        cfg = TrainConfig.from_dict(doc)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"config: {exc}") from exc
    vocab, graphs, images = sd.load_dataset(_require(a.data))
    if not graphs:
        raise ValidationError("dataset is empty")
    if not all(g.has_boxes for g in graphs):
        raise ValidationError("every training node needs a bbox")
    trainer = Trainer(vocab, cfg)
    trainer.fit(graphs, images, dump_dir=Path(a.out).parent)
    trainer.save(a.out)
    last = trainer.loss_curve[-1] if trainer.loss_curve else {}
    return {"out": str(a.out), "steps": trainer.step, "final": last}


def cmd_sample(a) -> dict:
    trainer = _load_trainer(a.ckpt)
    g = _load_graph(a.graph, trainer.vocab)
    seed = check_seed(a.seed)
    if a.steps < 1 or a.nl < 1:
        raise ValidationError("--steps and --nl must be positive")
    model = trainer.inference_model()
    state = mls.SeedState.create(g, seed, a.nl)
    state.extra.update({"seed": seed, "steps": a.steps, "cfg": a.cfg, "eta": a.eta, "mls": a.mls})
    if a.mls == "on":
        img, boxes, _ = pipeline.sample_layered(model, g, seed, a.steps, a.cfg, a.nl, a.eta, state)
    else:
        img, boxes = pipeline.sample_plain(model, g, seed, a.steps, a.cfg, a.eta)
    sd.write_ppm(a.out, pipeline.quantize(img))
    side = _sidecar_path(a.out, a.state_out)
    sd.atomic_write(side, state.to_json().encode("utf-8"))
    return {"out": str(a.out), "state": str(side), "boxes": np.round(boxes, 6).tolist()}


def cmd_edit(a) -> dict:
    trainer = _load_trainer(a.ckpt)
    g = _load_graph(a.graph, trainer.vocab)
    state = mls.SeedState.from_json(_require(a.state).read_bytes())
    state.check(g)
    edit = parse_edit(a.edit, g)
    steps = a.steps if a.steps is not None else int(state.extra.get("steps", cd.SAMPLE_STEPS))
    cfg = a.cfg if a.cfg is not None else float(state.extra.get("cfg", cd.CFG_SCALE))
    eta = a.eta if a.eta is not None else float(state.extra.get("eta", cd.SAMPLE_ETA))
    before, after, g_new, new_state = mls.edit_and_resample(ModelBackend(trainer.inference_model()), g, edit, state,
                                                            trainer.vocab, steps, cfg, eta)
    sd.write_ppm(a.out, pipeline.quantize(cd.to_image(after)))
    if a.before:
        sd.write_ppm(a.before, pipeline.quantize(cd.to_image(before)))
    side = _sidecar_path(a.out, a.state_out)
    sd.atomic_write(side, new_state.to_json().encode("utf-8"))
    graph_out = Path(str(a.out) + ".graph.json")
    _write_json(graph_out, to_dict(g_new))
    return {"out": str(a.out), "state": str(side), "graph": str(graph_out)}


def cmd_eval(a) -> dict:
    trainer = _load_trainer(a.ckpt)
    _, graphs, images = sd.load_dataset(_require(a.data))
    if a.limit is not None:
        graphs, images = graphs[:a.limit], images[:a.limit]
    if not graphs:
        raise ValidationError("dataset is empty")
    model = trainer.inference_model()
    metrics = pipeline.evaluate_samples(model, graphs, check_seed(a.seed), a.steps, a.cfg, a.mls == "on", a.nl,
                                        a.eta)
    report = {
        "layout_iou": metrics["layout_iou"],
        "attr_acc": metrics["attr_acc"],
        "count_acc": metrics["count_acc"],
        "layout_iou_gt": metrics["layout_iou_gt"],
        "layout_l1": pipeline.layout_l1(model, graphs, a.seed),
        "diffusion_loss": pipeline.diffusion_loss_eval(model, graphs, images, a.seed),
        "n_scenes": len(graphs),
        "loss_curve": trainer.loss_curve,
    }
    _write_json(a.report, report)
    return {k: v for k, v in report.items() if k != "loss_curve"}


def cmd_check_grad(a) -> dict:
    report = audit.gradient_suite(a.trials, a.seed)
    model = SceneDiffusionModel(sd.VOCAB, ModelConfig(seed=a.seed))
    scenes = [sd.generate_scene(sd.scene_seed(a.seed, k)) for k in range(4)]
    groups = gradient_audit(model, [s.graph for s in scenes], np.stack([s.image for s in scenes]),
                            Rng(a.seed).split("audit"))
    report["parameter_groups"] = groups["groups"]
    report["zero_grad_tensors"] = groups["zero_grad_tensors"]
    report["passed"] = report["passed"] and all(v > 0 for v in groups["groups"].values())
    if a.report:
        _write_json(a.report, report)
    if not report["passed"]:
        raise CheckFailed(f"gradient check failed: worst relative error {report['worst']:.3g}")
    return report


def cmd_eval_masks(a) -> dict:
    report = {"masks": audit.mask_suite(a.num, a.seed), "leakage": audit.leakage_suite(a.passes, a.seed)}
    report["passed"] = report["masks"]["passed"] and report["leakage"]["passed"]
    if a.report:
        _write_json(a.report, report)
    if not report["passed"]:
        raise CheckFailed("attention mask suite failed")
    return report


# -- argument parsing ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="scenecomp", description="Scene graph to image generation on 16x16 synthetic scenes.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to standard error")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("gen-data", help="render a synthetic dataset directory")
    s.add_argument("--out", required=True)
    s.add_argument("--num", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("train", help="train a model and write a checkpoint")
    s.add_argument("--config", required=True, help="JSON object with training config fields")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="sample one image from a scene graph")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--graph", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--steps", type=int, default=cd.SAMPLE_STEPS)
    s.add_argument("--cfg", type=float, default=cd.CFG_SCALE)
    s.add_argument("--nl", type=int, default=mls.N_VIEWS, help="number of layout views")
    s.add_argument("--mls", choices=("on", "off"), default="on")
    s.add_argument("--eta", type=float, default=cd.SAMPLE_ETA, help="0 deterministic, 1 ancestral")
    s.add_argument("--out", required=True, help="binary PPM path")
    s.add_argument("--state-out", help="seed sidecar path (default: OUT.seed.json)")
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("edit", help="edit the graph and resample with the stored seeds")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--graph", required=True)
    s.add_argument("--state", required=True, help="seed sidecar written by sample or edit")
    s.add_argument("--edit", required=True, help='"set-attr ID ATTR", "remove-attr ID ATTR" or "add-node CAT REL ID"')
    s.add_argument("--out", required=True)
    s.add_argument("--before", help="also write the unedited image here")
    s.add_argument("--state-out", help="sidecar for the edited graph (default: OUT.seed.json)")
    s.add_argument("--steps", type=int)
    s.add_argument("--cfg", type=float)
    s.add_argument("--eta", type=float)
    s.set_defaults(func=cmd_edit)

    s = sub.add_parser("eval", help="sample a dataset and score it with the blob detector")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--report", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--steps", type=int, default=cd.SAMPLE_STEPS)
    s.add_argument("--cfg", type=float, default=cd.CFG_SCALE)
    s.add_argument("--nl", type=int, default=mls.N_VIEWS)
    s.add_argument("--mls", choices=("on", "off"), default="off")
    s.add_argument("--eta", type=float, default=cd.SAMPLE_ETA)
    s.add_argument("--limit", type=int)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("check-grad", help="finite-difference audit of every op and a denoiser block")
    s.add_argument("--trials", type=int, default=20)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--report")
    s.set_defaults(func=cmd_check_grad)

    s = sub.add_parser("eval-masks", help="attention mask brute-force and leakage checks")
    s.add_argument("--num", type=int, default=1000)
    s.add_argument("--passes", type=int, default=100)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--report")
    s.set_defaults(func=cmd_eval_masks)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(message)s")
    try:
        with threadpool_limits(1):
            result = args.func(args)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (ValidationError, SceneGraphError, mls.MLSStateError, CheckpointError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except CheckFailed as exc:
        print(f"check failed: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception as exc:  # noqa: BLE001
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    print(json.dumps(result, indent=1, sort_keys=True, default=float))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
