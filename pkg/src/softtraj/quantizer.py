"""Value <-> token mapping with per-window reversible instance normalization.

Normalized values are clamped to ``[lo, hi]`` (default +-3 standard
deviations) and split into ``V`` tokens.  Tokens ``0`` and ``V - 1`` are the
low and high overflow bins; tokens ``1 .. V - 2`` are uniform interior bins.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .exceptions import ConfigurationError, ContractError

STD_FLOOR = 1e-6


@dataclass(frozen=True)
class NormStats:
    mean: float
    std: float

    def __post_init__(self):
        if not self.std > 0:
            raise ContractError(f"std must be positive, got {self.std}")


@dataclass(frozen=True)
class TokenSpec:
    V: int
    lo: float = -3.0
    hi: float = 3.0
    centers: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if int(self.V) != self.V or self.V < 4:
            raise ConfigurationError(f"V must be an integer >= 4, got {self.V}")
        if not self.hi > self.lo:
            raise ConfigurationError("hi must exceed lo")
        k = np.arange(1, self.V - 1, dtype=np.float64)
        interior = self.lo + (k - 0.5) * (self.hi - self.lo) / (self.V - 2)
        centers = np.concatenate([[self.lo], interior, [self.hi]])
        centers.setflags(write=False)
        object.__setattr__(self, "centers", centers)

    @property
    def binwidth(self) -> float:
        return (self.hi - self.lo) / (self.V - 2)

    def to_dict(self) -> dict:
        return {"V": int(self.V), "lo": float(self.lo), "hi": float(self.hi)}


@dataclass(frozen=True)
class ContextTokens:
    mean_token: int
    std_token: int


def normalize(window):
    """Return ``((window - mean) / std, NormStats)`` with the std floored."""
    x = np.asarray(window, dtype=np.float64)
    if x.size == 0:
        raise ContractError("cannot normalize an empty window")
    if not np.all(np.isfinite(x)):
        raise ContractError("window contains non-finite values")
    mu = float(x.mean())
    sigma = max(float(x.std()), STD_FLOOR)
    return (x - mu) / sigma, NormStats(mu, sigma)


def denormalize(values, stats: NormStats):
    return np.asarray(values, dtype=np.float64) * stats.std + stats.mean


def tokenize(value, spec: TokenSpec):
    """Map normalized value(s) to token index(es).

    Values at or below ``lo`` go to token 0 and values at or above ``hi`` to
    token ``V - 1``.  Interior bins are left-closed, right-open.  Scalars in,
    ``int`` out; arrays in, integer arrays out.
    """
    v = np.asarray(value, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise ContractError("cannot tokenize non-finite values")
    # multiply before dividing so that bin edges land on exact integers
    idx = np.floor((v - spec.lo) * (spec.V - 2) / (spec.hi - spec.lo))
    tok = 1 + np.clip(idx, 0, spec.V - 3).astype(np.int64)
    tok = np.where(v <= spec.lo, 0, tok)
    tok = np.where(v >= spec.hi, spec.V - 1, tok)
    if tok.ndim == 0:
        return int(tok)
    return tok


def bin_center(token, spec: TokenSpec):
    t = np.asarray(token)
    if not np.issubdtype(t.dtype, np.integer):
        raise ContractError(f"token must be integer, got dtype {t.dtype}")
    if np.any(t < 0) or np.any(t >= spec.V):
        raise ContractError(f"token out of range [0, {spec.V})")
    out = spec.centers[t]
    if out.ndim == 0:
        return float(out)
    return out


def _rescale(value, lo_hi, spec):
    a, b = lo_hi
    return spec.lo + (value - a) / (b - a) * (spec.hi - spec.lo)


def _check_range(name, lo_hi):
    a, b = float(lo_hi[0]), float(lo_hi[1])
    if not (np.isfinite(a) and np.isfinite(b)) or b <= a:
        raise ConfigurationError(f"degenerate global {name} range {lo_hi}")


def context_tokens(stats: NormStats, global_mu_range, global_sigma_range,
                   spec: TokenSpec) -> ContextTokens:
    """Tokenize a window's (mean, std) against ranges seen in training."""
    _check_range("mean", global_mu_range)
    _check_range("std", global_sigma_range)
    m = tokenize(_rescale(stats.mean, global_mu_range, spec), spec)
    s = tokenize(_rescale(stats.std, global_sigma_range, spec), spec)
    return ContextTokens(m, s)


def context_value(token: int, lo_hi, spec: TokenSpec) -> float:
    """Approximate inverse of the context rescaling (for diagnostics)."""
    a, b = lo_hi
    c = bin_center(np.int64(token), spec)
    return a + (c - spec.lo) / (spec.hi - spec.lo) * (b - a)


class WindowQuantizer(TransformerMixin, BaseEstimator):
    """Turn raw history windows into ``[mean_tok, std_tok, history...]`` rows.

    ``fit`` records the global ranges of window means and standard deviations
    that the context tokens are rescaled against.
    """

    def __init__(self, n_bins=64, clamp=3.0):
        self.n_bins = n_bins
        self.clamp = clamp

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        mu = X.mean(axis=1)
        sd = np.maximum(X.std(axis=1), STD_FLOOR)
        self.spec_ = TokenSpec(int(self.n_bins), -float(self.clamp), float(self.clamp))
        self.mu_range_ = _widen(float(mu.min()), float(mu.max()))
        self.sigma_range_ = _widen(float(sd.min()), float(sd.max()))
        return self

    def stats(self, X):
        X = check_array(X, dtype=np.float64)
        return [normalize(row)[1] for row in X]

    def transform(self, X):
        check_is_fitted(self, "spec_")
        X = check_array(X, dtype=np.float64)
        out = np.empty((X.shape[0], X.shape[1] + 2), dtype=np.int64)
        for i, row in enumerate(X):
            z, st = normalize(row)
            ctx = context_tokens(st, self.mu_range_, self.sigma_range_, self.spec_)
            out[i, 0] = ctx.mean_token
            out[i, 1] = ctx.std_token
            out[i, 2:] = tokenize(z, self.spec_)
        return out


def _widen(a: float, b: float):
    # a single training window gives a zero-width range; pad it
    if b > a:
        return (a, b)
    pad = max(abs(a) * 1e-3, 1e-3)
    return (a - pad, b + pad)
