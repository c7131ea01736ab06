"""Data-locality-aware master/worker computing framework."""

__version__ = "0.1.0"
