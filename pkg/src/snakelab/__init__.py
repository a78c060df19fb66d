"""Numerical laboratory for super-Brownian packing gauges."""

__version__ = "0.1.0"
