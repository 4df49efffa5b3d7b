"""Optimizer math, freezing, determinism, and checkpoint round trips."""

import copy
import json

import numpy as np
import pytest

from latmocha import data as D
from latmocha import training as tr
from latmocha.model import DecoderConfig, EncoderConfig, ModelConfig, init_model
from latmocha.objectives import ObjectiveConfig, s2s_forward
from latmocha.tensor import Tensor, no_grad
from latmocha.training import TrainConfig, adam_step, clip_gradients, init_moments


def small_model_cfg(mtl=False, ce_head=False):
    enc = EncoderConfig(input_dim=18, layers=1, hidden=24, stack_factor=3,
                        mtl_branch=mtl, ce_head=ce_head, align_vocab=6, dropout=0.0)
    dec = DecoderConfig(vocab=8, layers=1, hidden=24, embed_dim=12, dropout=0.0)
    return ModelConfig(encoder=enc, decoder=dec, attention_dim=12, chunk_width=3,
                       conv_kernel=5, noise_std=1.0)


def small_corpus(n=24, seed=0):
    return D.gen_segmental_task(n, vocab=6, durations=(3, 6), seed=seed,
                                segments=(2, 5), stack_factor=3)


def test_adam_first_step_magnitude():
    params = {"w": Tensor(np.zeros(4))}
    params["w"].requires_grad = True
    grads = {"w": np.array([1.0, -2.0, 0.5, 3.0])}
    moments = init_moments(params)
    assert adam_step(params, grads, moments, lr=0.1, step=1)
    np.testing.assert_allclose(np.abs(params["w"].data), 0.1, rtol=1e-6)
    np.testing.assert_allclose(np.sign(params["w"].data), -np.sign(grads["w"]))


def test_adam_zero_grad_keeps_params():
    params = {"w": Tensor(np.array([1.0, 2.0]))}
    moments = init_moments(params)
    assert adam_step(params, {"w": np.zeros(2)}, moments, lr=0.1, step=1)
    np.testing.assert_array_equal(params["w"].data, [1.0, 2.0])
    np.testing.assert_array_equal(moments["w"][0], 0.0)


def test_adam_three_step_hand_recurrence():
    lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-8
    w = 0.5
    m = v = 0.0
    grads = [0.3, -0.7, 1.1]
    params = {"w": Tensor(np.array(0.5))}
    moments = init_moments(params)
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w -= lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
        adam_step(params, {"w": np.array(g)}, moments, lr=lr, step=t)
        np.testing.assert_allclose(params["w"].data, w, atol=1e-14)


def test_adam_skips_nonfinite():
    params = {"w": Tensor(np.array([1.0]))}
    moments = init_moments(params)
    assert not adam_step(params, {"w": np.array([np.nan])}, moments, lr=0.1, step=1)
    np.testing.assert_array_equal(params["w"].data, [1.0])
    np.testing.assert_array_equal(moments["w"][0], [0.0])


def test_clip_gradients_global_norm():
    grads = {"a": np.array([3.0, 4.0]), "b": np.array([12.0])}  # norm 13
    norm = clip_gradients(grads, 5.0)
    assert norm == 13.0
    post = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    assert post <= 5.0 + 1e-9
    np.testing.assert_allclose(post, 5.0, rtol=1e-12)
    small = {"a": np.array([0.3])}
    clip_gradients(small, 5.0)
    np.testing.assert_array_equal(small["a"], [0.3])


def test_zero_epochs_returns_initialization():
    cfg = TrainConfig(model=small_model_cfg(), epochs=0, seed=3)
    result = tr.train(cfg, small_corpus())
    fresh = init_model(cfg.model, seed=3)
    for name, t in result.model.params.items():
        np.testing.assert_array_equal(t.data, fresh.params[name].data)
    assert result.history == [] and result.steps == 0


def test_stage1_freezes_decoder_and_attention():
    cfg = TrainConfig(model=small_model_cfg(ce_head=True),
                      objective=ObjectiveConfig(mode="pt-ce-stage1"),
                      epochs=2, batch_size=8, seed=4, eval_latency=False)
    before = {n: t.data.copy() for n, t in init_model(cfg.model, seed=4).params.items()}
    result = tr.train(cfg, small_corpus())
    for name, t in result.model.params.items():
        if name.startswith(("dec.", "att.")):
            assert np.array_equal(t.data, before[name]), name
        elif name.startswith("enc."):
            assert not np.array_equal(t.data, before[name]), name


def test_stage2_freezes_only_ce_head():
    cfg = TrainConfig(model=small_model_cfg(ce_head=True),
                      objective=ObjectiveConfig(mode="pt-ce-stage2"),
                      epochs=1, batch_size=8, seed=5, eval_latency=False)
    before = {n: t.data.copy() for n, t in init_model(cfg.model, seed=5).params.items()}
    result = tr.train(cfg, small_corpus())
    assert np.array_equal(result.model.params["enc.ce_head.w"].data, before["enc.ce_head.w"])
    assert not np.array_equal(result.model.params["dec.out.w"].data, before["dec.out.w"])


def test_smoke_run_loss_mostly_decreases():
    cfg = TrainConfig(model=small_model_cfg(), epochs=8, batch_size=16, lr=3e-3,
                      seed=6, eval_latency=False, holdout_fraction=0.1)
    result = tr.train(cfg, small_corpus(n=64, seed=7))
    losses = [r["loss"] for r in result.history]
    drops = sum(1 for a, b in zip(losses, losses[1:]) if b < a)
    assert drops >= 0.8 * (len(losses) - 1), losses


def test_training_deterministic():
    def run():
        cfg = TrainConfig(model=small_model_cfg(), epochs=3, batch_size=8,
                          seed=11, eval_latency=False)
        return [r["loss"] for r in tr.train(cfg, small_corpus(n=16, seed=11)).history]

    assert run() == run()


def test_mode_data_mismatch_fails_before_training():
    corpus = small_corpus(n=4)
    cfg = TrainConfig(model=small_model_cfg(),
                      objective=ObjectiveConfig(mode="mtl-ce"), epochs=1)
    with pytest.raises(ValueError):
        tr.train(cfg, corpus)  # encoder lacks a CE branch


def test_checkpoint_round_trip_bit_exact_forward(tmp_path):
    cfg = small_model_cfg()
    model = init_model(cfg, seed=8)
    # make parameters training-shaped (not exactly f32-representable)
    for t in model.params.values():
        t.data *= 1.0000001
    path = tmp_path / "m.ckpt"
    tr.save_checkpoint(path, model, step=7)
    state = tr.load_checkpoint(path)
    assert state["step"] == 7
    m2 = tr.model_from_checkpoint(state)
    path2 = tmp_path / "m2.ckpt"
    tr.save_checkpoint(path2, m2, step=7)
    assert path.read_bytes() == path2.read_bytes()  # save -> load -> save identity

    batch = D.batch_pad(small_corpus(n=2, seed=9), stack_factor=3)
    m3 = tr.model_from_checkpoint(tr.load_checkpoint(path2))
    with no_grad():
        out2 = s2s_forward(m2, batch, ObjectiveConfig(mode="baseline"))
        out3 = s2s_forward(m3, batch, ObjectiveConfig(mode="baseline"))
    assert np.array_equal(out2.logits.data, out3.logits.data)
    assert np.array_equal(out2.alpha.data, out3.alpha.data)


def test_checkpoint_corrupt_payload_rejected(tmp_path):
    model = init_model(small_model_cfg(), seed=10)
    path = tmp_path / "m.ckpt"
    tr.save_checkpoint(path, model)
    text = path.read_text()
    # flip one payload character
    idx = text.index('"data":"') + 10
    flipped = text[:idx] + ("A" if text[idx] != "A" else "B") + text[idx + 1 :]
    path.write_text(flipped)
    with pytest.raises(tr.CheckpointError, match="checksum"):
        tr.load_checkpoint(path)


def test_checkpoint_version_mismatch(tmp_path):
    model = init_model(small_model_cfg(), seed=10)
    path = tmp_path / "m.ckpt"
    tr.save_checkpoint(path, model)
    body = json.loads(path.read_text())
    body["format_version"] = 99
    path.write_text(json.dumps(body))
    with pytest.raises(tr.CheckpointError, match="version"):
        tr.load_checkpoint(path)


def test_partial_load_reports_mismatches(tmp_path):
    base = init_model(small_model_cfg(), seed=12)
    path = tmp_path / "base.ckpt"
    tr.save_checkpoint(path, base)
    bigger = init_model(small_model_cfg(mtl=True), seed=12)
    state = tr.load_checkpoint(path)
    with pytest.raises(tr.CheckpointError):
        tr.apply_checkpoint_params(bigger, state, partial=False)
    report = tr.apply_checkpoint_params(bigger, state, partial=True)
    assert any(n.startswith("enc.mtl") for n in report["missing"])
    assert report["unexpected"] == []
    assert "dec.out.w" in report["loaded"]
    for name in report["loaded"]:
        np.testing.assert_array_equal(
            bigger.params[name].data, base.params[name].data.astype("<f4").astype(np.float64))


def test_warm_start_into_new_objective(tmp_path):
    base_cfg = TrainConfig(model=small_model_cfg(), epochs=1, batch_size=8,
                           seed=13, eval_latency=False)
    base = tr.train(base_cfg, small_corpus(n=8, seed=13))
    path = tmp_path / "warm.ckpt"
    tr.save_checkpoint(path, base.model)
    cfg = TrainConfig(model=small_model_cfg(),
                      objective=ObjectiveConfig(mode="decot", delta=2),
                      epochs=1, batch_size=8, seed=14, warm_start=str(path),
                      eval_latency=False)
    result = tr.train(cfg, small_corpus(n=8, seed=14))
    assert result.warm_start_report["missing"] == []
    assert len(result.history) == 1


def test_history_records_shape():
    cfg = TrainConfig(model=small_model_cfg(), epochs=2, batch_size=8, seed=15,
                      eval_latency=True, holdout_fraction=0.25)
    result = tr.train(cfg, small_corpus(n=16, seed=15))
    for rec in result.history:
        assert set(rec) >= {"epoch", "loss", "token_acc", "latency_avg", "latency_median", "skipped"}
        assert rec["token_acc"] is not None
        assert rec["latency_median"] is not None
