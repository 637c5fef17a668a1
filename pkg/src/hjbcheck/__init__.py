"""Numerical audits of verification-theorem hypotheses for HJB inequalities."""

__version__ = "0.1.0"
