"""Shared electricity storage under single-peaked time-of-use tariffs."""

__version__ = "0.1.0"
