"""Estimation of target-population means and quantiles under label shift."""

__version__ = "0.1.0"
