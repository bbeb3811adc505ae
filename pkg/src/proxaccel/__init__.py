"""Proximal-gradient LASSO solvers with learned, convergence-safe stepsizes."""

__version__ = "0.1.0"
