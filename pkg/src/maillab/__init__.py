"""Selective state-space imitation-learning policies at desk scale."""

__version__ = "0.1.0"
