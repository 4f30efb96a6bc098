"""Causal price-sensitivity and renewal-pricing engine."""

__version__ = "0.1.0"
