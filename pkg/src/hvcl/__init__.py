"""Hierarchical variational continual learning with mixture-of-variational-experts layers."""

__version__ = "0.1.0"
