import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from softtraj import training
from softtraj.data import SeriesWindow, gen_synthetic, make_windows
from softtraj.exceptions import ConfigurationError, DivergenceError
from softtraj.model import (ModelConfig, backward, forward, init_params, load_checkpoint,
                            log_softmax)
from softtraj.quantizer import TokenSpec, normalize, tokenize
from softtraj.training import (TrainConfig, _ce, clip_gradients, global_norm, rollout,
                               run_curriculum, stage1_loss, stage2_loss, tokenize_window)

SPEC = TokenSpec(16)
RANGES = ((50.0, 250.0), (1.0, 40.0))


def test_tokenize_window_constant_history():
    w = SeriesWindow(np.full(10, 120.0), np.full(3, 120.0), "a", 0)
    inputs, targets, _ = tokenize_window(w, TokenSpec(17), *RANGES)
    assert len(inputs) == 12
    assert np.all(inputs[2:] == tokenize(0.0, TokenSpec(17)))


def test_tokenize_window_targets_use_history_stats(rng):
    h = rng.normal(120, 15, 24)
    y = rng.normal(120, 30, 6)
    inputs, targets, stats = tokenize_window(SeriesWindow(h, y, "a", 0), SPEC, *RANGES)
    _, s = normalize(h)
    for i in range(6):
        assert targets[i] == tokenize((y[i] - s.mean) / s.std, SPEC)


def _batch(rng, B=4, T=10, L=5, V=16):
    return rng.integers(0, V, (B, T + 2)), rng.integers(0, V, (B, L))


def test_ce_of_confident_truth_is_zero():
    labels = np.array([[1, 3]])
    logits = np.full((1, 2, 5), -1e4)
    logits[0, 0, 1] = logits[0, 1, 3] = 0.0
    assert _ce(logits, labels)[0] == pytest.approx(0.0, abs=1e-12)


def test_stage1_uniform_model_gives_log_v(tiny_params, rng):
    tiny_params.tensors["head.w"][:] = 0
    tiny_params.tensors["head.b"][:] = 0
    x, y = _batch(rng)
    assert stage1_loss(tiny_params, x, y, with_grads=False).loss == pytest.approx(math.log(16))


def test_stage1_loss_matches_recomputation(tiny_params, rng):
    x, y = _batch(rng)
    res = stage1_loss(tiny_params, x, y)
    manual = -np.mean(np.log(np.take_along_axis(res.probs, res.labels[..., None], -1)))
    assert abs(res.loss - manual) < 1e-6
    assert res.labels.shape[1] == 10 + 5     # context tokens never targets


def test_stage2_l1_equals_stage1_first_target(tiny_params, rng):
    x, y = _batch(rng, L=1)
    s2 = stage2_loss(tiny_params, x, y, L=1, with_grads=False).loss
    s1 = stage1_loss(tiny_params, x, y, with_grads=False)
    first = -np.mean(np.log(s1.probs[:, -1][np.arange(len(y)), y[:, 0]]))
    assert abs(s2 - first) < 1e-6


def test_stage2_finite_and_nonnegative(tiny_params, rng):
    x, y = _batch(rng, L=6)
    res = stage2_loss(tiny_params, x, y)
    assert math.isfinite(res.loss) and res.loss >= 0
    assert all(np.all(np.isfinite(g)) for g in res.grads.values())


def test_stage2_cross_step_gradient(tiny_params, rng):
    """With only step 2 scored, gradients must still flow through step 1's output."""
    x, y = _batch(rng, L=2)
    full = stage2_loss(tiny_params, x, y, feedback_weight=[0.0, 1.0]).grads
    # same loss with the fed-back distribution treated as a constant
    seq = rollout(tiny_params, x, 2)
    logits, cache = forward(tiny_params, seq)
    n0 = x.shape[1]
    d = np.zeros_like(logits)
    p = np.exp(log_softmax(logits[:, n0]))
    p[np.arange(len(y)), y[:, 1]] -= 1.0
    d[:, n0] = p / y.size
    detached, _ = backward(tiny_params, d, cache)
    diff = math.sqrt(sum(np.sum((full[k] - detached[k]) ** 2) for k in full))
    assert diff > 1e-6


def test_stage2_horizon_too_long(tiny_params, rng):
    x, y = _batch(rng, T=40, L=10)
    with pytest.raises(ConfigurationError):
        stage2_loss(tiny_params, x, y)


def test_clip_examples():
    g = {"a": np.array([0.3, 0.4, 0.0])}
    out, n = clip_gradients(g, 1.0)
    assert n == pytest.approx(0.5)
    np.testing.assert_array_equal(out["a"], g["a"])
    big = {"a": np.array([0.0, 2.4, 3.2])}            # norm 4
    out, n = clip_gradients(big, 1.0)
    assert n == pytest.approx(4.0)
    assert global_norm(out) == pytest.approx(1.0, abs=1e-9)
    cos = np.dot(out["a"], big["a"]) / (np.linalg.norm(out["a"]) * 4.0)
    assert cos == pytest.approx(1.0, abs=1e-9)
    np.testing.assert_allclose(out["a"], [0.0, 0.6, 0.8])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=20), st.floats(1e-3, 10.0))
def test_post_clip_norm_bound(vals, c):
    out, g = clip_gradients({"x": np.array(vals), "y": np.array(vals[::-1])}, c)
    assert global_norm(out) <= c + 1e-9
    assert global_norm(out) == pytest.approx(min(g, c), abs=1e-9)


def test_train_config_validation():
    with pytest.raises(ConfigurationError):
        TrainConfig(lr_stage1=0)
    with pytest.raises(ConfigurationError):
        TrainConfig(clip_norm=-1)


def _ar2_windows(T=16, L=4, n=4, length=300, seed=0, stride=4):
    series = gen_synthetic("ar2", n, length, seed=seed)
    tr = [w for s in series[:-1] for w in make_windows(s, T, L, stride)]
    va = [w for w in make_windows(series[-1], T, L, 8)]
    return tr, va


MC = ModelConfig(V=16, d=16, n_layers=1, n_heads=2, max_len=32)


def test_one_epoch_per_stage():
    tr, va = _ar2_windows()
    cfg = TrainConfig(batch_size=16, max_epochs=1, patience=0, horizon=4, lr_stage1=1e-3,
                      max_batches_per_epoch=2)
    _, report, _ = run_curriculum(tr, va, cfg, MC)
    assert [(r["stage"], r["epoch"]) for r in report.epochs] == [(1, 1), (2, 1)]
    for stage in (1, 2):
        assert report.best_val[f"stage{stage}"] == min(report.losses(stage))


def test_trajectory_off_runs_stage1_only():
    tr, va = _ar2_windows()
    cfg = TrainConfig(batch_size=16, max_epochs=2, horizon=4, trajectory_training=False,
                      max_batches_per_epoch=2)
    _, report, _ = run_curriculum(tr, va, cfg, MC)
    assert {r["stage"] for r in report.epochs} == {1}


def test_determinism_checkpoint_bytes(tmp_path):
    tr, va = _ar2_windows()
    cfg = TrainConfig(batch_size=16, max_epochs=2, horizon=4, lr_stage1=1e-3,
                      max_batches_per_epoch=3)
    r1 = run_curriculum(tr, va, cfg, MC, checkpoint_path=tmp_path / "a.ckpt")[1]
    r2 = run_curriculum(tr, va, cfg, MC, checkpoint_path=tmp_path / "b.ckpt")[1]
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert r1.epochs == r2.epochs


def test_early_stopping_within_patience(monkeypatch):
    tr, va = _ar2_windows()
    seq = iter([1.0, 0.5, 0.9, 0.8, 0.7, 0.6, 0.55, 0.4] + [0.3] * 50)
    monkeypatch.setattr(training, "_eval_loss", lambda *a, **k: next(seq))
    cfg = TrainConfig(batch_size=16, max_epochs=20, patience=2, horizon=4,
                      trajectory_training=False, max_batches_per_epoch=1)
    _, report, _ = run_curriculum(tr, va, cfg, MC)
    # best at epoch 2; epochs 3 and 4 are within patience; stop at epoch 5
    assert report.stopped_epoch["stage1"] == 5
    assert report.best_val["stage1"] == 0.5


def test_divergence_keeps_last_good_checkpoint(tmp_path, monkeypatch):
    tr, va = _ar2_windows()

    def boom(*a, **k):
        return training.LossResult(float("nan"), None, None, None)

    monkeypatch.setattr(training, "stage2_loss", boom)
    cfg = TrainConfig(batch_size=16, max_epochs=1, horizon=4, max_batches_per_epoch=1)
    with pytest.raises(DivergenceError):
        run_curriculum(tr, va, cfg, MC, checkpoint_path=tmp_path / "m.ckpt")
    params, *_, meta = load_checkpoint(tmp_path / "m.ckpt")
    assert meta["diverged"] is True and params.all_finite()


def test_stage1_beats_uniform_on_learnable_data():
    tr, va = _ar2_windows(n=6, length=600)
    cfg = TrainConfig(batch_size=32, max_epochs=6, horizon=4, lr_stage1=3e-3,
                      trajectory_training=False)
    params, report, ctx = run_curriculum(tr, va, cfg, MC)
    x, y, *_ = training.tokenize_arrays(
        np.stack([w.history for w in tr]), np.stack([w.target for w in tr]),
        ctx["spec"], ctx["mu_range"], ctx["sigma_range"])
    assert stage1_loss(params, x, y, with_grads=False).loss < math.log(16)


def test_stage2_lowers_unrolled_validation_ce():
    """Stage-2 fine-tuning beats the Stage-1 checkpoint on the L=48 unrolled CE."""
    series = gen_synthetic("ar2", 6, 800, seed=2)
    T, L = 16, 48
    tr = [w for s in series[:-1] for w in make_windows(s, T, L, 8)]
    va = make_windows(series[-1], T, L, 16)
    mc = ModelConfig(V=16, d=16, n_layers=1, n_heads=2, max_len=T + L + 2)
    cfg = TrainConfig(batch_size=32, max_epochs=8, max_epochs_stage2=3, horizon=L,
                      lr_stage1=3e-3, lr_stage2=1e-3, max_batches_per_epoch=6)
    s1 = run_curriculum(tr, va, TrainConfig(**{**cfg.__dict__, "trajectory_training": False}),
                        mc)[0]
    s2, _, ctx = run_curriculum(tr, va, cfg, mc)
    x, y, *_ = training.tokenize_arrays(
        np.stack([w.history for w in va]), np.stack([w.target for w in va]),
        ctx["spec"], ctx["mu_range"], ctx["sigma_range"])
    l1 = stage2_loss(s1, x, y, with_grads=False).loss
    l2 = stage2_loss(s2, x, y, with_grads=False).loss
    assert l2 < l1
