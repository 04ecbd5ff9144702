"""Momentum-centric kinodynamic motion generation for legged systems."""

__version__ = "0.1.0"
