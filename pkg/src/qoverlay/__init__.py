"""Secure overlay circuits over a simulated BB84 quantum underlay."""

__version__ = "0.1.0"
