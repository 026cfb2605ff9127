"""Hierarchical industry assignment with dynamic industry representations."""

__version__ = "0.1.0"
