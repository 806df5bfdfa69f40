"""Adaptive Q1 finite elements for quasi-static phase-field fracture."""

__version__ = "0.1.0"
