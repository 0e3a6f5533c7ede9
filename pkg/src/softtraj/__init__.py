"""Discretized autoregressive forecasting with soft-token feedback and
risk-aware decoding."""

__version__ = "0.1.0"
