"""Simulator for encrypted vertical logistic regression and its leakage attacks."""

__version__ = "0.1.0"
