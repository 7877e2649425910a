"""Adversarial image detection by contrasting classification with attention masks."""

__version__ = "0.1.0"
