"""Debiased two-stage IV regression with cross-fitting, and the offline IV bandit on top of it."""

__version__ = "0.1.0"
