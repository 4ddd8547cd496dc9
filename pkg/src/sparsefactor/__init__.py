"""Sparse latent factor forecasting with iterative proximal-gradient inference."""

__version__ = "0.1.0"
