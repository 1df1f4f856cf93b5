"""Generalized conditional functional principal component analysis."""

__version__ = "0.1.0"
