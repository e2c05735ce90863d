"""Covariate-dependent product partition model with NGGP cohesion for
ordinal-response treatment selection."""
__version__ = "0.1.0"
