"""Contrastive prompt learning for all-in-one image restoration, at desk scale."""

__version__ = "0.1.0"
