"""scikit-learn style wrapper around the training and decoding pipeline."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .data import SeriesWindow
from .decoding import DecodeConfig, forecast_trajectory
from .exceptions import ContractError
from .metrics import mean_risk, rmse
from .model import ModelConfig
from .quantizer import TokenSpec
from .riskgrid import RiskGrid, resolve_grid
from .training import TrainConfig, run_curriculum


def _as_windows(X, y, prefix):
    return [SeriesWindow(X[i], y[i], f"{prefix}-{i}", 0) for i in range(len(X))]


def check_xy(X, y=None, *, horizon=None):
    """Validate ``(n, T)`` histories and optional ``(n, L)`` targets."""
    X = check_array(X, dtype=np.float64, ensure_min_samples=1, ensure_min_features=2)
    if y is None:
        return X, None
    y = check_array(y, dtype=np.float64, ensure_2d=False, ensure_min_samples=1)
    if y.ndim == 1:
        y = y[:, None]
    if len(y) != len(X):
        raise ContractError(f"X has {len(X)} rows but y has {len(y)}")
    if horizon is not None and y.shape[1] < horizon:
        raise ContractError(f"targets have {y.shape[1]} steps, horizon is {horizon}")
    return X, y


class SoftTokenForecaster(BaseEstimator):
    """Soft-token trajectory forecaster.

    ``fit`` runs the two-stage curriculum on ``(X, y)`` history/target
    arrays; ``predict`` returns ``(n, horizon)`` point forecasts decoded with
    ``lam`` against ``grid``.
    """

    def __init__(self, n_bins=64, d_model=64, n_layers=2, n_heads=2, max_len=512,
                 horizon=48, batch_size=64, lr_stage1=1e-4, lr_stage2=1e-5, clip_norm=1.0,
                 patience=5, max_epochs=50, max_epochs_stage2=None, max_batches_per_epoch=None,
                 trajectory_training=True, lam=0.0, decode_mode="soft-risk", sample_count=5,
                 grid="clarke", val_fraction=0.15, random_state=0):
        self.n_bins = n_bins
        self.d_model = d_model
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.max_len = max_len
        self.horizon = horizon
        self.batch_size = batch_size
        self.lr_stage1 = lr_stage1
        self.lr_stage2 = lr_stage2
        self.clip_norm = clip_norm
        self.patience = patience
        self.max_epochs = max_epochs
        self.max_epochs_stage2 = max_epochs_stage2
        self.max_batches_per_epoch = max_batches_per_epoch
        self.trajectory_training = trajectory_training
        self.lam = lam
        self.decode_mode = decode_mode
        self.sample_count = sample_count
        self.grid = grid
        self.val_fraction = val_fraction
        self.random_state = random_state

    def _grid(self):
        return self.grid if isinstance(self.grid, RiskGrid) else resolve_grid(self.grid)

    def fit(self, X, y, X_val=None, y_val=None):
        X, y = check_xy(X, y, horizon=self.horizon)
        if X_val is None:
            rng = np.random.default_rng(self.random_state)
            order = rng.permutation(len(X))
            n_val = max(1, int(round(self.val_fraction * len(X))))
            if n_val >= len(X):
                raise ContractError("need at least two windows to carve out validation")
            va, tr = order[:n_val], order[n_val:]
            X, y, X_val, y_val = X[tr], y[tr], X[va], y[va]
        else:
            X_val, y_val = check_xy(X_val, y_val, horizon=self.horizon)
        mcfg = ModelConfig(V=self.n_bins, d=self.d_model, n_layers=self.n_layers,
                           n_heads=self.n_heads, max_len=self.max_len)
        tcfg = TrainConfig(batch_size=self.batch_size, lr_stage1=self.lr_stage1,
                           lr_stage2=self.lr_stage2, clip_norm=self.clip_norm,
                           patience=self.patience, max_epochs=self.max_epochs,
                           max_epochs_stage2=self.max_epochs_stage2, horizon=self.horizon,
                           seed=self.random_state,
                           trajectory_training=self.trajectory_training,
                           max_batches_per_epoch=self.max_batches_per_epoch)
        params, report, ctx = run_curriculum(
            _as_windows(X, y, "train"), _as_windows(X_val, y_val, "val"), tcfg, mcfg,
            spec=TokenSpec(self.n_bins))
        self.params_ = params
        self.context_ = ctx
        self.report_ = report
        self.n_features_in_ = X.shape[1]
        return self

    def _forecast(self, X, lam=None, horizon=None):
        check_is_fitted(self, "params_")
        X, _ = check_xy(X)
        if X.shape[1] != self.n_features_in_:
            raise ContractError(f"expected histories of length {self.n_features_in_}, "
                                f"got {X.shape[1]}")
        cfg = DecodeConfig(lam=self.lam if lam is None else lam, mode=self.decode_mode,
                           sample_count=self.sample_count, seed=self.random_state)
        return forecast_trajectory(X, self.params_, self.context_, self._grid(), cfg,
                                   horizon or self.horizon)

    def predict(self, X, lam=None, horizon=None):
        return self._forecast(X, lam, horizon).points

    def predict_distribution(self, X, horizon=None):
        """``ForecastResult`` with per-step distributions and decoded points."""
        return self._forecast(X, horizon=horizon)

    def score(self, X, y):
        """Negative RMSE (higher is better, as scikit-learn expects)."""
        X, y = check_xy(X, y)
        pts = self.predict(X, horizon=y.shape[1])
        return -rmse(pts, y)

    def risk_score(self, X, y):
        X, y = check_xy(X, y)
        grid = self._grid()
        pts = self.predict(X, horizon=y.shape[1])
        return mean_risk(grid.clamp(pts), grid.clamp(y), grid)
