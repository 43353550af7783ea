"""Desk-scale lab for flatness-driven adversarial transferability."""
__version__ = "0.1.0"
