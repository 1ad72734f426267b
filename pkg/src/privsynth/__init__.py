"""Differentially private synthetic data with semantic-aware public pretraining."""

__version__ = "0.1.0"
