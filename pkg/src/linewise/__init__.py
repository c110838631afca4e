"""Transformer line-segment descriptors with line-signature message passing."""

__version__ = "0.1.0"
