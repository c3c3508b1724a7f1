"""Lattice approximation of a truncated Heston model and shortfall-risk DP."""

__version__ = "0.1.0"
