"""Inventory and recommendation coordination laboratory."""

__version__ = "0.1.0"
