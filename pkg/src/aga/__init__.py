"""Adaptive grouped image-text alignment on a synthetic, fully checkable corpus."""

__version__ = "0.1.0"
