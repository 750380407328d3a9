"""Reduced-precision emulation, analysis and fine-tuning for small CNNs."""

__version__ = "0.1.0"
