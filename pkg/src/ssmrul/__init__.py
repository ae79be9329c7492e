"""Quantile-conditioned remaining-useful-life estimation with structured state space models."""

__version__ = "0.1.0"
