"""Semantic mapping with learned per-class imagination of unseen object extent."""

__version__ = "0.1.0"
