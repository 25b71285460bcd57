"""Numerical experiments for boundary observability and null controllability of
the fractional heat and wave equations on an interval."""

__version__ = "0.1.0"
