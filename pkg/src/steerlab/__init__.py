"""Activation-steering laboratory on a toy transformer with planted concepts."""

__version__ = "0.1.0"
