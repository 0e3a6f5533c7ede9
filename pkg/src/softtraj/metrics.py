"""Evaluation metrics: RMSE, zone risk, risky percentage, CRPS, calibration."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import ContractError
from .quantizer import NormStats, TokenSpec

DEFAULT_LEVELS = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.95)


class UndefinedMetricError(ContractError):
    """A metric was requested over an empty sample."""


def _pair(points, truths):
    x = np.asarray(points, dtype=np.float64).ravel()
    y = np.asarray(truths, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ContractError(f"length mismatch: {x.size} points vs {y.size} truths")
    if x.size == 0:
        raise UndefinedMetricError("metric undefined on an empty sample")
    return x, y


def rmse(points, truths) -> float:
    x, y = _pair(points, truths)
    return float(np.sqrt(np.mean((x - y) ** 2)))


def mean_risk(points, truths, grid) -> float:
    x, y = _pair(points, truths)
    return float(np.mean(grid.risk(y, x)))


def risky_pct(points, truths, grid, safe_set=None) -> float:
    x, y = _pair(points, truths)
    return float(100.0 * np.count_nonzero(grid.risky(y, x, safe_set)) / x.size)


def zone_occupancy(points, truths, grid) -> dict:
    """Percentage of ``(truth, point)`` pairs per zone label (all labels present)."""
    x, y = _pair(points, truths)
    idx = grid.zone_index(y, x)
    counts = np.bincount(idx.ravel(), minlength=len(grid.labels))
    return {lab: float(100.0 * c / x.size) for lab, c in zip(grid.labels, counts)}


# ---------------------------------------------------------------------------
# probabilistic metrics

def crps_discrete(p, support, truth) -> float:
    """CRPS of point masses ``p`` at sorted ``support`` against ``truth``.

    The predictive CDF is a step function, so the integrand is constant
    between consecutive breakpoints (support points plus the truth) and the
    integral is an exact finite sum.
    """
    p = np.asarray(p, dtype=np.float64)
    c = np.asarray(support, dtype=np.float64)
    truth = float(truth)
    if not np.isfinite(truth):
        raise ContractError("truth must be finite")
    b = np.sort(np.append(c, truth))
    cdf = np.concatenate([[0.0], np.cumsum(p)])
    F = cdf[np.searchsorted(c, b[:-1], side="right")]
    ind = (b[:-1] >= truth).astype(np.float64)
    return float(np.sum((F - ind) ** 2 * np.diff(b)))


def crps(p, spec: TokenSpec, stats: NormStats, truth) -> float:
    """CRPS of a token distribution in measurement units."""
    return crps_discrete(p, spec.centers * stats.std + stats.mean, truth)


def mean_crps(distributions, means, stds, spec: TokenSpec, truths) -> float:
    """Mean CRPS over ``(n, L, V)`` distributions and ``(n, L)`` truths."""
    d = np.asarray(distributions)
    y = np.asarray(truths, dtype=np.float64)
    if d.shape[:2] != y.shape:
        raise ContractError("distributions and truths disagree in shape")
    if y.size == 0:
        raise UndefinedMetricError("metric undefined on an empty sample")
    total = 0.0
    for i in range(d.shape[0]):
        c = spec.centers * stds[i] + means[i]
        for k in range(d.shape[1]):
            total += crps_discrete(d[i, k], c, y[i, k])
    return total / y.size


def interpolated_cdf_knots(p, support):
    """Knots of the piecewise-linear CDF used for interval inversion.

    Mass ``p_k`` is split evenly around each support point: the CDF passes
    through ``(c_k, F_k - p_k / 2)`` and reaches 0 and 1 half an end gap
    beyond the outer support points.
    """
    p = np.asarray(p, dtype=np.float64)
    c = np.asarray(support, dtype=np.float64)
    if c.size < 2:
        raise ContractError("need at least two support points")
    F = np.cumsum(p)
    F /= F[-1]
    mid = F - p / F[-1] / 2.0
    lo_pad = (c[1] - c[0]) / 2.0
    hi_pad = (c[-1] - c[-2]) / 2.0
    x = np.concatenate([[c[0] - lo_pad], c, [c[-1] + hi_pad]])
    y = np.concatenate([[0.0], mid, [1.0]])
    return x, y


def interpolated_quantile(x, y, alpha):
    """Smallest ``z`` with ``G(z) = alpha`` for knots ``(x, y)``, ``0 < alpha < 1``."""
    j = int(np.searchsorted(y, alpha, side="left"))
    j = min(max(j, 1), len(y) - 1)
    y0, y1 = y[j - 1], y[j]
    if y1 == y0:
        return float(x[j - 1])
    return float(x[j - 1] + (alpha - y0) / (y1 - y0) * (x[j] - x[j - 1]))


def central_interval(p, support, level):
    x, y = interpolated_cdf_knots(p, support)
    return (interpolated_quantile(x, y, (1.0 - level) / 2.0),
            interpolated_quantile(x, y, (1.0 + level) / 2.0))


def calibration_curve(distributions, supports, truths, levels=DEFAULT_LEVELS):
    """``[(nominal, empirical), ...]`` central-interval coverage.

    ``distributions`` is ``(n, V)``; ``supports`` is ``(V,)`` shared or
    ``(n, V)`` per case; ``truths`` is ``(n,)``.
    """
    levels = [float(q) for q in levels]
    if any(not 0.0 < q < 1.0 for q in levels):
        raise ContractError("levels must lie in (0, 1)")
    P = np.asarray(distributions, dtype=np.float64)
    P = P.reshape(-1, P.shape[-1])
    y = np.asarray(truths, dtype=np.float64).ravel()
    S = np.asarray(supports, dtype=np.float64)
    if S.ndim == 1:
        S = np.broadcast_to(S, P.shape)
    else:
        S = S.reshape(P.shape)
    if len(y) != len(P):
        raise ContractError("distributions and truths disagree in length")
    if len(y) == 0:
        raise UndefinedMetricError("calibration undefined on an empty sample")
    hits = np.zeros(len(levels))
    for i in range(len(P)):
        x, g = interpolated_cdf_knots(P[i], S[i])
        for j, q in enumerate(levels):
            lo = interpolated_quantile(x, g, (1.0 - q) / 2.0)
            hi = interpolated_quantile(x, g, (1.0 + q) / 2.0)
            hits[j] += lo <= y[i] <= hi
    return [(q, float(h / len(P))) for q, h in zip(levels, hits)]


# ---------------------------------------------------------------------------
# reports

@dataclass
class EvalReport:
    """Metrics per horizon plus the unweighted ``Avg`` row."""
    grid_name: str
    lam: float
    mode: str
    rows: dict = field(default_factory=dict)          # label -> metric dict
    per_step: list = field(default_factory=list)      # one dict per forecast step
    zone_occupancy: dict = field(default_factory=dict)
    calibration: list = field(default_factory=list)
    n_windows: int = 0
    clamped: int = 0

    METRICS = ("rmse", "mean_risk", "risky_pct", "crps")

    def to_dict(self) -> dict:
        return {
            "grid": self.grid_name, "lambda": self.lam, "mode": self.mode,
            "n_windows": self.n_windows, "clamped_centers": self.clamped,
            "rows": self.rows, "per_step": self.per_step,
            "zone_occupancy": self.zone_occupancy,
            "calibration": [list(c) for c in self.calibration],
        }

    def table(self) -> str:
        head = f"{'horizon':>8} " + " ".join(f"{m:>10}" for m in self.METRICS)
        lines = [head]
        for label, row in self.rows.items():
            lines.append(f"{label:>8} " + " ".join(f"{row[m]:10.4f}" for m in self.METRICS))
        return "\n".join(lines)

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


def evaluate_forecasts(result, truths, grid, horizons, lam=0.0, mode="soft-risk",
                       levels=DEFAULT_LEVELS, with_crps=True) -> EvalReport:
    """Score a ForecastResult of length ``max(horizons)`` against truths.

    A horizon ``h`` row covers all steps ``1..h``.  Points and truths are
    clamped into the grid domain before risk is computed.
    """
    horizons = sorted(int(h) for h in horizons)
    y = np.asarray(truths, dtype=np.float64)
    H = horizons[-1]
    if result.points.shape[1] < H or y.shape[1] < H:
        raise ContractError(f"forecasts shorter than the largest horizon {H}")
    pts = result.points[:, :H]
    y = y[:, :H]
    pc, yc = grid.clamp(pts), grid.clamp(y)
    n = len(y)
    step_crps = np.zeros(H)
    if with_crps:
        for i in range(n):
            c = result.centers(i)
            for k in range(H):
                step_crps[k] += crps_discrete(result.distributions[i, k], c, y[i, k])
        step_crps /= n
    per_step = []
    for k in range(H):
        per_step.append({
            "step": k + 1,
            "rmse": rmse(pts[:, k], y[:, k]),
            "mean_risk": mean_risk(pc[:, k], yc[:, k], grid),
            "risky_pct": risky_pct(pc[:, k], yc[:, k], grid),
            "crps": float(step_crps[k]),
        })
    rows = {}
    for h in horizons:
        rows[str(h)] = {
            "rmse": rmse(pts[:, :h], y[:, :h]),
            "mean_risk": mean_risk(pc[:, :h], yc[:, :h], grid),
            "risky_pct": risky_pct(pc[:, :h], yc[:, :h], grid),
            "crps": float(step_crps[:h].mean()),
        }
    rows["Avg"] = {m: float(np.mean([rows[str(h)][m] for h in horizons]))
                   for m in EvalReport.METRICS}
    calib = []
    if levels:
        supports = np.stack([result.centers(i) for i in range(n)])
        S = np.repeat(supports[:, None, :], H, axis=1)
        calib = calibration_curve(result.distributions[:, :H], S, y, levels)
    return EvalReport(
        grid_name=getattr(grid, "name", "grid"), lam=float(lam), mode=mode, rows=rows,
        per_step=per_step, zone_occupancy=zone_occupancy(pc, yc, grid),
        calibration=calib, n_windows=n, clamped=result.clamped,
    )


def write_calibration_csv(calibration, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["nominal", "empirical"])
        for q, e in calibration:
            w.writerow([repr(q), repr(e)])
