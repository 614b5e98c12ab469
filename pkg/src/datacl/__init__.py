"""Decomposed attention-based task adaptation for continual learning, at desk scale."""

__version__ = "0.1.0"
