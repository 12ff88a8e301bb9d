"""Bayesian SEIIRD surveillance model fitted to tests, cases and deaths."""

__version__ = "0.1.0"
