"""Turning predictive token distributions into point forecasts."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import ConfigurationError, ContractError
from .model import ModelParams, forward_incremental, one_hot, softmax
from .quantizer import NormStats, TokenSpec
from .training import check_horizon, sample_median_tokens, tokenize_arrays

MODES = ("soft-risk", "soft-mse", "hard-sample-median")


@dataclass
class DecodeConfig:
    lam: float = 0.0
    mode: str = "soft-risk"
    sample_count: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigurationError("lambda must be >= 0")
        if self.mode not in MODES:
            raise ConfigurationError(f"unknown decode mode {self.mode!r}; expected {MODES}")
        if self.sample_count < 1 or self.sample_count % 2 == 0:
            raise ConfigurationError("sample_count must be a positive odd integer")

    @property
    def effective_lam(self) -> float:
        return 0.0 if self.mode == "soft-mse" else float(self.lam)

    @property
    def feedback(self) -> str:
        return "median" if self.mode == "hard-sample-median" else "soft"


@dataclass
class ClampCounter:
    """Counts bin centers that fell outside a grid's domain and were clamped."""
    clamped: int = 0


def _denorm_centers(spec: TokenSpec, mean, std):
    return spec.centers * std + mean


def risk_matrix(grid, centers, counter: ClampCounter | None = None):
    """``R[v, x] = f_r(true=centers[v], pred=centers[x])`` on clamped centers."""
    c = np.asarray(centers, dtype=np.float64)
    cc = grid.clamp(c)
    if counter is not None:
        counter.clamped += int(np.count_nonzero(cc != c))
    return grid.risk(cc[:, None], cc[None, :])


def decode_objective(probs, centers, R, lam):
    """Per-candidate ``(objective, risk_term, sq_term)`` for distributions
    ``probs`` (``(..., V)``) over denormalized ``centers``."""
    p = np.asarray(probs, dtype=np.float64)
    c = np.asarray(centers, dtype=np.float64)
    sq = (c[None, :] - c[:, None]) ** 2      # sq[v, x]
    sq_term = p @ sq
    risk_term = p @ R if R is not None else np.zeros_like(sq_term)
    return lam * risk_term + sq_term, risk_term, sq_term


def argmin_with_ties(obj, risk_term):
    """Lowest objective; ties to lower risk term, then lower index."""
    obj = np.atleast_2d(obj)
    risk_term = np.atleast_2d(risk_term)
    best = obj.min(axis=-1, keepdims=True)
    cand = obj == best
    r = np.where(cand, risk_term, np.inf)
    rbest = r.min(axis=-1, keepdims=True)
    cand &= r == rbest
    return np.argmax(cand, axis=-1)


def decode_tokens(probs, centers, grid=None, lam=0.0, counter=None):
    """Vectorized risk-aware decoding over rows of ``probs`` sharing ``centers``."""
    probs = np.asarray(probs, dtype=np.float64)
    R = risk_matrix(grid, centers, counter) if (grid is not None and lam > 0) else None
    if R is None:
        R0 = risk_matrix(grid, centers) if grid is not None else None
        obj, rt, _ = decode_objective(probs, centers, R0, 0.0)
    else:
        obj, rt, _ = decode_objective(probs, centers, R, lam)
    flat = argmin_with_ties(obj.reshape(-1, obj.shape[-1]), rt.reshape(-1, rt.shape[-1]))
    return flat.reshape(probs.shape[:-1])


def _check_dist(p, V):
    p = np.asarray(p, dtype=np.float64)
    if p.shape[-1] != V:
        raise ContractError(f"distribution length {p.shape[-1]} != V={V}")
    if np.any(p < 0) or np.any(np.abs(p.sum(-1) - 1.0) > 1e-6):
        raise ContractError("not a probability distribution")
    return p


def decode_risk(p, spec: TokenSpec, stats: NormStats, grid, lam: float,
                counter: ClampCounter | None = None) -> float:
    """Point forecast minimizing ``lam * E[risk] + E[squared error]``.

    Every bin center is a candidate; both terms are evaluated in measurement
    units, with the value drawn from ``p`` as the truth and the candidate as
    the prediction.
    """
    if lam < 0:
        raise ConfigurationError("lambda must be >= 0")
    p = _check_dist(p, spec.V)
    c = _denorm_centers(spec, stats.mean, stats.std)
    tok = decode_tokens(p, c, grid, lam, counter)
    return float(c[int(tok)])


def decode_mse(p, spec: TokenSpec, stats: NormStats) -> float:
    p = _check_dist(p, spec.V)
    c = _denorm_centers(spec, stats.mean, stats.std)
    return float(c[int(decode_tokens(p, c))])


def decode_hard_median(p, spec: TokenSpec, stats: NormStats, sample_count=5, seed=0,
                       grid=None, lam=0.0):
    """Return ``(point, feedback_token)``.

    The feedback token is the median of ``sample_count`` draws from ``p``;
    the point forecast is decoded from ``p`` itself (risk rule when a grid
    and ``lam > 0`` are given, otherwise expected squared error).
    """
    if sample_count < 1 or sample_count % 2 == 0:
        raise ConfigurationError("sample_count must be a positive odd integer")
    p = _check_dist(p, spec.V)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    tok = int(sample_median_tokens(p[None], rng, sample_count)[0])
    c = _denorm_centers(spec, stats.mean, stats.std)
    point = float(c[int(decode_tokens(p, c, grid, lam))])
    return point, tok


# ---------------------------------------------------------------------------
# trajectories

@dataclass
class ForecastResult:
    """Per-window, per-step predictive distributions and decoded points."""
    distributions: np.ndarray          # (n, L, V)
    points: np.ndarray                 # (n, L) measurement units
    tokens: np.ndarray                 # (n, L) decoded token indices
    means: np.ndarray                  # (n,) history means
    stds: np.ndarray                   # (n,) history stds
    spec: TokenSpec
    window_ids: list = field(default_factory=list)
    clamped: int = 0

    def centers(self, i):
        return _denorm_centers(self.spec, self.means[i], self.stds[i])

    def truncate(self, L):
        return ForecastResult(self.distributions[:, :L], self.points[:, :L],
                              self.tokens[:, :L], self.means, self.stds, self.spec,
                              self.window_ids, self.clamped)

    def redecode(self, grid, lam):
        """Decode the stored distributions again under a different ``lam``."""
        return decode_points(self.distributions, self.means, self.stds, self.spec, grid, lam,
                             self.window_ids)


def decode_points(dists, means, stds, spec, grid, lam, window_ids=None) -> ForecastResult:
    counter = ClampCounter()
    n, L, V = dists.shape
    tokens = np.empty((n, L), dtype=np.int64)
    points = np.empty((n, L))
    for i in range(n):
        c = _denorm_centers(spec, means[i], stds[i])
        tokens[i] = decode_tokens(dists[i], c, grid, lam, counter)
        points[i] = c[tokens[i]]
    return ForecastResult(dists, points, tokens, np.asarray(means), np.asarray(stds), spec,
                          list(window_ids or range(n)), counter.clamped)


def forecast_trajectory(history, params: ModelParams, context: dict, grid, config: DecodeConfig,
                        L: int, batch_size: int = 256, window_ids=None) -> ForecastResult:
    """Autoregressive ``L``-step forecasts for one ``(T,)`` or many ``(n, T)``
    history windows.

    Soft modes feed each predicted distribution back as a soft token; the
    hard mode feeds the one-hot median of ``sample_count`` sampled tokens.
    """
    X = np.atleast_2d(np.asarray(history, dtype=np.float64))
    spec = context["spec"]
    check_horizon(params.config, X.shape[1], L)
    inputs, _, mu, sd = tokenize_arrays(X, None, spec, context["mu_range"],
                                        context["sigma_range"])
    rng = np.random.default_rng(config.seed)
    V = spec.V
    dists = np.empty((len(X), L, V))
    for s in range(0, len(X), batch_size):
        step = one_hot(inputs[s:s + batch_size], V, params.dtype)
        state = None
        for k in range(L):
            logits, state = forward_incremental(params, step, state)
            p = softmax(logits[:, -1].astype(np.float64))
            dists[s:s + batch_size, k] = p
            if k == L - 1:
                break
            if config.feedback == "median":
                fb = one_hot(sample_median_tokens(p, rng, config.sample_count), V, params.dtype)
            else:
                fb = p.astype(params.dtype)
            step = fb[:, None, :]
    return decode_points(dists, mu, sd, spec, grid, config.effective_lam, window_ids)


# ---------------------------------------------------------------------------
# serialization

def write_forecast_csv(result: ForecastResult, path, truths=None, grid=None) -> None:
    """``window_id,step,point_forecast,truth,zone,risk`` rows (truth/zone/risk
    left empty when no truths are given)."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["window_id", "step", "point_forecast", "truth", "zone", "risk"])
        for i, wid in enumerate(result.window_ids):
            for k in range(result.points.shape[1]):
                pt = float(result.points[i, k])
                if truths is None:
                    w.writerow([wid, k + 1, repr(pt), "", "", ""])
                    continue
                t = float(truths[i, k])
                zone = risk = ""
                if grid is not None:
                    tc, pc = grid.clamp(t), grid.clamp(pt)
                    zone, risk = grid.zone(tc, pc), repr(grid.risk(tc, pc))
                w.writerow([wid, k + 1, repr(pt), repr(t), zone, risk])


def write_forecast_json(result: ForecastResult, path, truths=None) -> None:
    doc = {
        "token_spec": result.spec.to_dict(),
        "windows": [
            {
                "window_id": str(wid),
                "mean": float(result.means[i]),
                "std": float(result.stds[i]),
                "points": result.points[i].tolist(),
                "truths": None if truths is None else np.asarray(truths[i]).tolist(),
                "distributions": np.round(result.distributions[i], 8).tolist(),
            }
            for i, wid in enumerate(result.window_ids)
        ],
    }
    Path(path).write_text(json.dumps(doc))
