"""Hierarchical atomic action network for weakly-supervised fine-grained
temporal action detection."""

__version__ = "0.1.0"
