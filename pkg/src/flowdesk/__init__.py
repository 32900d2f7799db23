"""Desk-scale flow matching, diffusion and evaluation toolkit."""

__version__ = "0.1.0"
