"""Deblurring RGB frames with spatial and temporal difference guidance."""

__version__ = "0.1.0"
