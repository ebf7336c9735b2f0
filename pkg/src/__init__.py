"""Shatter lab - sequence encoders with relative partition attention."""

__version__ = "1.0.0"
