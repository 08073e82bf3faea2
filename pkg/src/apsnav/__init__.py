"""Adversarial path sampling for instruction-following navigation."""

__version__ = "0.1.0"
