"""Conditional icon generation from orthogonal app and theme labels."""

__version__ = "0.1.0"
