"""Bayesian normal and nonparametric meta-analysis of effect sizes."""

__version__ = "0.1.0"
