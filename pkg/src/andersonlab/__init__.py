"""Numerical lab for mollified white-noise Anderson Hamiltonians on boxes."""

__version__ = "0.1.0"
