import numpy as np
import pytest

from scenecomp import synthdata as sd
from scenecomp import trainer as trn
from scenecomp.model import SceneDiffusionModel
from scenecomp.tensorcore import Rng, parameter
from scenecomp.trainer import AdamW, TrainConfig, Trainer

INERT = {"embedder.attribute_null", "tokenizer.fused_null"}


@pytest.fixture(scope="module")
def data():
    scenes = [sd.generate_scene(sd.scene_seed(0, k)) for k in range(8)]
    return [s.graph for s in scenes], np.stack([s.image for s in scenes])


def small_config(**kw):
    base = dict(steps=3, batch_size=4, lr=1e-3, log_every=1, seed=5)
    base.update(kw)
    return TrainConfig(**base)


def test_adamw_matches_hand_formula():
    p = parameter(np.array([1.0, -2.0]))
    p.grad = np.array([0.5, 0.1])
    opt = AdamW({"p": p}, weight_decay=0.1)
    opt.step(0.01)
    # first step: bias-corrected m/sqrt(v) = sign(g)
    expected = np.array([1.0, -2.0]) - 0.01 * (np.sign([0.5, 0.1]) * (1 / (1 + 1e-8 / np.abs([0.5, 0.1])))
                                                + 0.1 * np.array([1.0, -2.0]))
    np.testing.assert_allclose(p.data, expected, rtol=1e-12)


def test_clip_gradients():
    a, b = parameter(np.zeros(2)), parameter(np.zeros(1))
    a.grad, b.grad = np.array([3.0, 0.0]), np.array([4.0])
    assert trn.clip_gradients([a, b], 1.0) == pytest.approx(5.0)
    np.testing.assert_allclose(np.concatenate([a.grad, b.grad]), [0.6, 0.0, 0.8])
    a.grad = np.array([0.1, 0.0])
    b.grad = np.array([0.1])
    trn.clip_gradients([a, b], 1.0)
    assert a.grad[0] == 0.1


def test_linear_lr_decay():
    cfg = TrainConfig(steps=100, lr=1e-3, lr_final=1e-4)
    assert cfg.lr_at(0) == 1e-3 and cfg.lr_at(100) == pytest.approx(1e-4)
    assert cfg.lr_at(50) == pytest.approx(5.5e-4)


def test_config_validation():
    assert TrainConfig().loss_weights == (1.0, 0.1, 1.0)
    assert TrainConfig().batch_size == 16 and TrainConfig().steps == 5000 and TrainConfig().clip_norm == 1.0
    with pytest.raises(ValueError, match="unknown"):
        TrainConfig.from_dict({"stepz": 3})
    with pytest.raises(ValueError):
        TrainConfig(lr=-1.0)
    assert TrainConfig.from_dict(TrainConfig().to_dict()) == TrainConfig()


def test_batches_cover_epochs():
    seen = np.concatenate([trn.batch_indices(0, s, 4, 8) for s in range(2)])
    assert sorted(seen) == list(range(8))


def test_zero_steps_checkpoint_equals_init(tmp_path, data):
    cfg = small_config(steps=0)
    tr = Trainer(sd.VOCAB, cfg)
    tr.fit(*data)
    tr.save(tmp_path / "a.ckpt")
    fresh = SceneDiffusionModel(sd.VOCAB, cfg.model_config())
    loaded = trn.load_model(tmp_path / "a.ckpt")
    for (k, p), (_, q) in zip(fresh.named_parameters(), loaded.named_parameters()):
        assert np.array_equal(p.data, q.data), k


def test_checkpoint_round_trip_is_byte_identical(tmp_path, data):
    tr = Trainer(sd.VOCAB, small_config(steps=2))
    tr.fit(*data)
    tr.save(tmp_path / "a.ckpt")
    back = Trainer.from_checkpoint(tmp_path / "a.ckpt")
    for (k, p), (_, q) in zip(tr.model.named_parameters(), back.model.named_parameters()):
        assert p.data.tobytes() == q.data.tobytes(), k
    back.save(tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert back.step == 2 and back.opt.t == 2


def test_checkpoint_errors(tmp_path):
    tr = Trainer(sd.VOCAB, small_config(steps=0))
    blob = trn.encode_checkpoint(tr.state_tensors(), {**tr.meta(), "format_version": trn.FORMAT_VERSION})
    with pytest.raises(trn.CheckpointError, match="truncated"):
        trn.decode_checkpoint(blob[: len(blob) // 2])
    with pytest.raises(trn.CheckpointVersionError):
        trn.decode_checkpoint(b"DISCO002" + blob[8:])
    with pytest.raises(trn.CheckpointError, match="magic"):
        trn.decode_checkpoint(b"NOTACKPT" + blob[8:])
    tensors, meta = trn.decode_checkpoint(blob)
    del tensors["model/embedder.category_table"]
    with pytest.raises(trn.CheckpointError, match="embedder.category_table"):
        Trainer.from_state(tensors, meta)
    (tmp_path / "t.ckpt").write_bytes(blob[:-3])
    with pytest.raises(trn.CheckpointError):
        Trainer.from_checkpoint(tmp_path / "t.ckpt")
    bad_meta = {**meta, "format_version": 99}
    with pytest.raises(trn.CheckpointVersionError):
        trn.decode_checkpoint(trn.encode_checkpoint({}, bad_meta))


def test_training_is_deterministic(tmp_path, data):
    for name in ("a", "b"):
        tr = Trainer(sd.VOCAB, small_config())
        tr.fit(*data)
        tr.save(tmp_path / f"{name}.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_resume_matches_uninterrupted(tmp_path, data):
    full = Trainer(sd.VOCAB, small_config(steps=4))
    full.fit(*data)
    part = Trainer(sd.VOCAB, small_config(steps=4))
    part.fit(*data, steps=2)
    part.save(tmp_path / "p.ckpt")
    resumed = Trainer.from_checkpoint(tmp_path / "p.ckpt")
    resumed.fit(*data)
    for (k, p), (_, q) in zip(full.model.named_parameters(), resumed.model.named_parameters()):
        assert np.array_equal(p.data, q.data), k


def test_gradient_audit(data):
    model = SceneDiffusionModel(sd.VOCAB)
    report = trn.gradient_audit(model, data[0][:4], data[1][:4], Rng(1))
    assert all(v > 0 for v in report["groups"].values()), report["groups"]
    # padded-slot nulls are masked out of every visual token's attention, and
    # every synthetic node carries a color, so these two never reach the loss
    assert set(report["zero_grad_tensors"]) <= INERT
    assert not np.any(model.denoiser.out.weight.data)


def test_non_finite_loss_aborts_with_dump(tmp_path, data, monkeypatch):
    tr = Trainer(sd.VOCAB, small_config())

    monkeypatch.setattr(tr, "compute_losses", lambda *a: (_ for _ in ()).throw(trn.NonFiniteError("mul")))
    before = {k: p.data.copy() for k, p in tr.model.named_parameters()}
    with pytest.raises(trn.TrainingError, match="non-finite"):
        tr.fit(*data, dump_dir=tmp_path)
    assert list(tmp_path.glob("nonfinite_step0.json"))
    for k, p in tr.model.named_parameters():
        assert np.array_equal(p.data, before[k])


def test_weight_average_tracks_parameters(tmp_path, data):
    graphs, images = data
    tr = Trainer(sd.VOCAB, small_config(ema_decay=0.9))
    key = "denoiser.patch_embed.weight"
    expected = tr.params[key].data.copy()
    for step in range(1, 4):
        tr.fit(graphs, images, steps=step)
        d = min(0.9, (1.0 + step) / (10.0 + step))
        expected = d * expected + (1 - d) * tr.params[key].data
    np.testing.assert_allclose(tr.ema[key], expected, rtol=1e-12)
    tr.save(tmp_path / "e.ckpt")
    back = Trainer.from_checkpoint(tmp_path / "e.ckpt")
    np.testing.assert_array_equal(back.ema[key], tr.ema[key])
    avg = dict(back.inference_model().named_parameters())[key].data
    np.testing.assert_array_equal(avg, tr.ema[key])
    assert not np.array_equal(avg, back.params[key].data)
    assert trn.load_model(tmp_path / "e.ckpt") is not back.model


def test_without_weight_average_inference_uses_live_weights(data):
    tr = Trainer(sd.VOCAB, small_config())
    assert tr.ema is None and tr.inference_model() is tr.model
    assert not any(k.startswith("ema/") for k in tr.state_tensors())
