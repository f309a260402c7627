"""Gradient-descent feature learning of a two-layer ReLU CNN under label noise."""

__version__ = "0.1.0"
