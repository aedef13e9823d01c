"""Consensus ADMM with sensitivity-based subproblem updates."""

__version__ = "0.1.0"
