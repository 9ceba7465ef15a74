"""Prototype-augmented message passing for node classification."""

__version__ = "0.1.0"
