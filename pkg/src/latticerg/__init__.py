"""Desk-scale renormalisation-group machinery for lattice gradient models."""

__version__ = "0.1.0"
