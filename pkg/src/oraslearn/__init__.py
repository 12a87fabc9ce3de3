"""Learned two-level optimized restricted additive Schwarz preconditioners."""

__version__ = "0.1.0"
