"""Correspondence-free online motion retargeting for point-cloud sequences."""

__version__ = "0.1.0"
