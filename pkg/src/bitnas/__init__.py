"""Differentiable search over per-block weight/activation bit-widths."""

__version__ = "0.1.0"
