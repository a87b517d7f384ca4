"""Deterministic simulation of communication-avoiding distributed GCN training."""

__version__ = "0.1.0"
