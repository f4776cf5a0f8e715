"""Subband rectified-flow vocoder."""

__version__ = "0.1.0"
