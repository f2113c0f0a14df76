"""Multidimensional dynamic factor models for ragged panels."""

__version__ = "0.1.0"
