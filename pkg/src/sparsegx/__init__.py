"""Sparse Bayesian ANOVA regression and sparse latent factor models for expression data."""

__version__ = "0.1.0"
