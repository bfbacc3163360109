"""Disaggregation of coarse hourly counts over nested geographies."""

__version__ = "0.1.0"
