"""Numerical laboratory for weight-decay mechanisms in first- and
second-order neural-network training."""

__version__ = "0.1.0"
