"""Periodicity-aware latent-state representation learning for multivariate time series."""

__version__ = "0.1.0"
