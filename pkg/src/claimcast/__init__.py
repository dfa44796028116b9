"""Individual claims cash-flow forecasting with a Bayesian mixture density network."""

__version__ = "0.1.0"
