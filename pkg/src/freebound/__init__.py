"""Penalized solver and verification tools for weighted volume-constrained
free boundary problems on the unit ball."""

__version__ = "0.1.0"
