"""Two-stage curriculum: teacher-forced next-token pre-training followed by
differentiable trajectory fine-tuning with soft-token feedback."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import ConfigurationError, DivergenceError
from .model import (ModelConfig, ModelParams, backward, forward, forward_incremental,
                    init_params, log_softmax, one_hot, save_checkpoint, softmax)
from .quantizer import TokenSpec, context_tokens, normalize, tokenize

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 64
    lr_stage1: float = 1e-4
    lr_stage2: float = 1e-5
    clip_norm: float = 1.0
    patience: int = 5
    max_epochs: int = 50
    max_epochs_stage2: int | None = None
    horizon: int = 48
    seed: int = 0
    trajectory_training: bool = True
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    max_batches_per_epoch: int | None = None
    max_val_windows: int | None = None

    def __post_init__(self):
        if self.lr_stage1 <= 0 or self.lr_stage2 <= 0:
            raise ConfigurationError("learning rates must be positive")
        if self.clip_norm <= 0:
            raise ConfigurationError("clip_norm must be positive")
        if self.batch_size < 1 or self.horizon < 1 or self.max_epochs < 1:
            raise ConfigurationError("batch_size, horizon and max_epochs must be >= 1")
        if self.patience < 0:
            raise ConfigurationError("patience must be >= 0")


@dataclass
class TrainReport:
    epochs: list = field(default_factory=list)
    stopped_epoch: dict = field(default_factory=dict)
    best_val: dict = field(default_factory=dict)
    checkpoint: str | None = None

    def record(self, stage, epoch, train_loss, val_loss):
        row = {"stage": stage, "epoch": epoch, "train_loss": train_loss, "val_loss": val_loss}
        self.epochs.append(row)
        return row

    def losses(self, stage):
        return [r["val_loss"] for r in self.epochs if r["stage"] == stage]

    def to_dict(self):
        return asdict(self)


@dataclass
class LossResult:
    loss: float
    grads: dict | None
    probs: np.ndarray  # predicted distributions at the supervised positions
    labels: np.ndarray


# ---------------------------------------------------------------------------
# tokenization

def tokenize_window(window, spec: TokenSpec, mu_range, sigma_range):
    """Return ``(inputs, targets, stats)`` token arrays for one window.

    ``inputs`` is ``[mean_token, std_token, history tokens...]`` (length
    ``T + 2``).  Target values are normalized with the history's statistics.
    """
    z, stats = normalize(window.history)
    ctx = context_tokens(stats, mu_range, sigma_range, spec)
    inputs = np.concatenate([[ctx.mean_token, ctx.std_token], tokenize(z, spec)])
    zt = (np.asarray(window.target, dtype=np.float64) - stats.mean) / stats.std
    return inputs.astype(np.int64), np.atleast_1d(tokenize(zt, spec)).astype(np.int64), stats


def tokenize_arrays(X, y, spec, mu_range, sigma_range):
    """Vectorized ``tokenize_window`` over stacked ``(n, T)``/``(n, L)`` arrays."""
    X = np.asarray(X, dtype=np.float64)
    mu = X.mean(axis=1)
    sd = np.maximum(X.std(axis=1), 1e-6)
    n = len(X)
    inputs = np.empty((n, X.shape[1] + 2), dtype=np.int64)
    for i in range(n):
        # route through the scalar path so stats agree bit-for-bit
        _, st = normalize(X[i])
        ctx = context_tokens(st, mu_range, sigma_range, spec)
        inputs[i, 0], inputs[i, 1] = ctx.mean_token, ctx.std_token
        mu[i], sd[i] = st.mean, st.std
    inputs[:, 2:] = tokenize((X - mu[:, None]) / sd[:, None], spec)
    targets = None
    if y is not None:
        y = np.asarray(y, dtype=np.float64)
        targets = tokenize((y - mu[:, None]) / sd[:, None], spec).astype(np.int64)
    return inputs, targets, mu, sd


# ---------------------------------------------------------------------------
# losses

def _ce(logits, labels):
    """Mean cross-entropy and its gradient w.r.t. ``logits``."""
    lsm = log_softmax(logits)
    n = labels.size
    nll = -np.take_along_axis(lsm, labels[..., None], axis=-1)[..., 0]
    probs = np.exp(lsm)
    dlogits = probs.copy()
    np.put_along_axis(dlogits, labels[..., None], np.take_along_axis(
        dlogits, labels[..., None], axis=-1) - 1.0, axis=-1)
    return float(nll.astype(np.float64).sum() / n), dlogits / n, probs


def stage1_loss(params: ModelParams, inputs, targets, with_grads=True) -> LossResult:
    """Teacher-forced next-token cross-entropy.

    The model reads ``[ctx, history, targets[:-1]]`` as one-hot tokens and is
    scored on predicting every history and target token.  The two context
    tokens are never prediction targets.
    """
    inputs = np.atleast_2d(inputs)
    targets = np.atleast_2d(targets)
    V = params.config.V
    seq = np.concatenate([inputs, targets[:, :-1]], axis=1)
    labels = np.concatenate([inputs[:, 2:], targets], axis=1)
    logits, cache = forward(params, one_hot(seq, V, params.dtype), keep_cache=with_grads)
    loss, dsub, probs = _ce(logits[:, 1:], labels)
    grads = None
    if with_grads:
        dlogits = np.zeros_like(logits)
        dlogits[:, 1:] = dsub
        grads, _ = backward(params, dlogits, cache)
    return LossResult(loss, grads, probs, labels)


def rollout(params: ModelParams, inputs, L, feedback="soft", rng=None, sample_count=5):
    """Feed the model its own predictions for ``L - 1`` steps.

    Returns the ``(B, S + L - 1, V)`` input sequence.  ``feedback`` is
    ``"soft"`` (append the predicted distribution) or ``"median"`` (append
    the one-hot median of ``sample_count`` sampled tokens).
    """
    V = params.config.V
    seq = [one_hot(np.atleast_2d(inputs), V, params.dtype)]
    state = None
    for _ in range(L - 1):
        logits, state = forward_incremental(params, seq[-1], state)
        p = softmax(logits[:, -1])
        if feedback == "median":
            tok = sample_median_tokens(p, rng, sample_count)
            p = one_hot(tok, V, params.dtype)
        seq.append(p[:, None, :].astype(params.dtype))
    return np.concatenate(seq, axis=1)


def sample_median_tokens(p, rng, sample_count=5):
    """Median of ``sample_count`` i.i.d. token draws per row of ``p``."""
    if sample_count < 1 or sample_count % 2 == 0:
        raise ConfigurationError("sample_count must be a positive odd integer")
    p = np.asarray(p, dtype=np.float64)
    cdf = np.cumsum(p, axis=-1)
    cdf /= cdf[..., -1:]
    u = rng.random(p.shape[:-1] + (sample_count,))
    draws = np.empty(u.shape, dtype=np.int64)
    for idx in np.ndindex(p.shape[:-1]):
        draws[idx] = np.searchsorted(cdf[idx], u[idx], side="right")
    draws = np.minimum(draws, p.shape[-1] - 1)
    return np.sort(draws, axis=-1)[..., sample_count // 2]


def check_horizon(cfg: ModelConfig, T: int, L: int):
    if L > cfg.max_len - T - 2:
        raise ConfigurationError(
            f"horizon {L} exceeds max_len - T - 2 = {cfg.max_len - T - 2}")


def stage2_loss(params: ModelParams, inputs, targets, L=None, with_grads=True,
                feedback_weight=None) -> LossResult:
    """Cross-entropy of an ``L``-step soft-token rollout against true targets.

    Gradients are exact through every fed-back distribution.  The rollout
    is replayed as one causal forward pass; the adjoint of the feedback loop
    ``input[t + 1] = softmax(logits[t])`` is strictly lower-triangular, so
    ``L - 1`` backward sweeps reach its fixed point.

    ``feedback_weight`` (optional, shape ``(L,)``) reweights the per-step
    losses; used by tests that isolate cross-step gradient flow.
    """
    inputs = np.atleast_2d(inputs)
    targets = np.atleast_2d(targets)
    L = targets.shape[1] if L is None else L
    targets = targets[:, :L]
    B, n0 = inputs.shape
    check_horizon(params.config, n0 - 2, L)
    seq = rollout(params, inputs, L)
    logits, cache = forward(params, seq, keep_cache=with_grads)
    pred = logits[:, n0 - 1:]
    loss, dpred, probs = _ce(pred, targets)
    if feedback_weight is not None:
        w = np.asarray(feedback_weight, dtype=np.float64)
        lsm = log_softmax(pred)
        nll = -np.take_along_axis(lsm, targets[..., None], axis=-1)[..., 0]
        loss = float((nll * w).sum() / targets.size)
        dpred = dpred * w[None, :, None].astype(dpred.dtype)
    if not with_grads:
        return LossResult(loss, None, probs, targets)

    direct = np.zeros_like(logits)
    direct[:, n0 - 1:] = dpred
    fed = slice(n0, n0 + L - 1)     # positions holding fed-back distributions
    src = slice(n0 - 1, n0 + L - 2)  # logits that produced them
    p_src = softmax(logits[:, src])
    total = direct
    for _ in range(L - 1):
        _, dprobs = backward(params, total, cache, input_only=True)
        dp = dprobs[:, fed]
        dz = p_src * (dp - (dp * p_src).sum(-1, keepdims=True))
        total = direct.copy()
        total[:, src] += dz
    grads, _ = backward(params, total, cache)
    return LossResult(loss, grads, probs, targets)


# ---------------------------------------------------------------------------
# optimisation

def global_norm(grads) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))


def clip_gradients(grads: dict, clip_norm: float):
    """Scale all gradients by ``clip_norm / norm`` when the global L2 norm
    exceeds ``clip_norm``.  Returns ``(grads, pre_clip_norm)``."""
    norm = global_norm(grads)
    if norm > clip_norm:
        s = clip_norm / norm
        grads = {k: (g * s).astype(g.dtype) for k, g in grads.items()}
    return grads, norm


class Adam:
    def __init__(self, params: ModelParams, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for k, p in self.params.items():
            g = grads[k]
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            upd = self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            p -= upd.astype(p.dtype)
        self.params.touch()


# ---------------------------------------------------------------------------
# curriculum

def _batches(n, batch_size, rng, limit=None):
    order = rng.permutation(n)
    out = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    return out[:limit] if limit else out


def _eval_loss(params, inputs, targets, stage, batch_size, L):
    total, count = 0.0, 0
    for i in range(0, len(inputs), batch_size):
        xb, yb = inputs[i:i + batch_size], targets[i:i + batch_size]
        if stage == 1:
            res = stage1_loss(params, xb, yb, with_grads=False)
        else:
            res = stage2_loss(params, xb, yb, L, with_grads=False)
        total += res.loss * len(xb)
        count += len(xb)
    return total / count


def _run_stage(stage, params, train, val, cfg: TrainConfig, report, log_fh, rng):
    lr = cfg.lr_stage1 if stage == 1 else cfg.lr_stage2
    max_epochs = cfg.max_epochs if stage == 1 or cfg.max_epochs_stage2 is None \
        else cfg.max_epochs_stage2
    opt = Adam(params, lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    L = cfg.horizon
    best = (math.inf, params.copy(), 0)
    epoch = 0
    for epoch in range(1, max_epochs + 1):
        losses = []
        for idx in _batches(len(train[0]), cfg.batch_size, rng, cfg.max_batches_per_epoch):
            xb, yb = train[0][idx], train[1][idx]
            res = (stage1_loss(params, xb, yb) if stage == 1
                   else stage2_loss(params, xb, yb, L))
            if not math.isfinite(res.loss):
                raise DivergenceError(f"stage {stage} epoch {epoch}: non-finite loss")
            grads, _ = clip_gradients(res.grads, cfg.clip_norm)
            opt.step(grads)
            if not params.all_finite():
                raise DivergenceError(f"stage {stage} epoch {epoch}: non-finite parameters")
            losses.append(res.loss)
        train_loss = float(np.mean(losses))
        val_loss = _eval_loss(params, val[0], val[1], stage, cfg.batch_size, L)
        row = report.record(stage, epoch, train_loss, val_loss)
        logger.info("stage %d epoch %d train %.5f val %.5f", stage, epoch, train_loss, val_loss)
        if log_fh is not None:
            log_fh.write(json.dumps(row) + "\n")
            log_fh.flush()
        if val_loss < best[0]:
            best = (val_loss, params.copy(), epoch)
        elif epoch - best[2] > cfg.patience:
            break
    report.stopped_epoch[f"stage{stage}"] = epoch
    report.best_val[f"stage{stage}"] = best[0]
    return best[1]


def run_curriculum(train_windows, val_windows, config: TrainConfig, model_config: ModelConfig,
                   spec: TokenSpec = None, checkpoint_path=None, log_path=None,
                   init=None, stage1_checkpoint_path=None):
    """Stage 1 (teacher forcing) then, if enabled, Stage 2 (trajectory).

    Each stage keeps the parameters with the best validation loss for its
    own objective; Stage 2 starts from the best Stage-1 parameters.
    Returns ``(params, report, context)`` where ``context`` holds the token
    spec and the global mean/std ranges needed for inference.
    """
    from .data import windows_to_arrays
    from .quantizer import WindowQuantizer

    if not train_windows or not val_windows:
        raise ConfigurationError("training and validation windows must be non-empty")
    spec = spec or TokenSpec(model_config.V)
    if spec.V != model_config.V:
        raise ConfigurationError("token spec V must equal the model vocabulary size")
    Xtr, ytr = windows_to_arrays(train_windows)
    Xva, yva = windows_to_arrays(val_windows)
    if ytr.shape[1] < config.horizon or yva.shape[1] < config.horizon:
        raise ConfigurationError("windows are shorter than the training horizon")
    ytr, yva = ytr[:, :config.horizon], yva[:, :config.horizon]
    check_horizon(model_config, Xtr.shape[1], config.horizon)

    q = WindowQuantizer(spec.V, spec.hi).fit(Xtr)
    ctx = {"spec": spec, "mu_range": q.mu_range_, "sigma_range": q.sigma_range_}
    tr = tokenize_arrays(Xtr, ytr, spec, q.mu_range_, q.sigma_range_)[:2]
    va = tokenize_arrays(Xva, yva, spec, q.mu_range_, q.sigma_range_)[:2]
    if config.max_val_windows and len(va[0]) > config.max_val_windows:
        pick = np.random.default_rng(config.seed + 1).choice(
            len(va[0]), config.max_val_windows, replace=False)
        pick.sort()
        va = (va[0][pick], va[1][pick])

    rng = np.random.default_rng(config.seed)
    params = init.copy() if init is not None else init_params(model_config, seed=config.seed)
    report = TrainReport()
    log_fh = open(log_path, "w") if log_path else None
    last_good = params
    try:
        try:
            params = _run_stage(1, params, tr, va, config, report, log_fh, rng)
            last_good = params
            if stage1_checkpoint_path:
                save_checkpoint(stage1_checkpoint_path, params, spec, q.mu_range_,
                                q.sigma_range_, meta={"stages": 1})
            if config.trajectory_training:
                params = _run_stage(2, params.copy(), tr, va, config, report, log_fh, rng)
                last_good = params
        except DivergenceError:
            if checkpoint_path:
                save_checkpoint(checkpoint_path, last_good, spec, q.mu_range_, q.sigma_range_,
                                meta={"diverged": True})
            raise
    finally:
        if log_fh is not None:
            log_fh.close()
    if checkpoint_path:
        save_checkpoint(checkpoint_path, params, spec, q.mu_range_, q.sigma_range_,
                        meta={"stages": 2 if config.trajectory_training else 1})
        report.checkpoint = str(checkpoint_path)
    return params, report, ctx


def write_report(report: TrainReport, path) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
