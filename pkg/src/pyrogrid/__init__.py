"""Distributed multi-horizon wildfire grid-map prediction with learned sample exchange."""

__version__ = "0.1.0"
