"""Synthetic control estimation and inference for regional panels."""

__version__ = "0.1.0"
