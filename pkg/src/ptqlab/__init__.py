"""Desk-scale mixed-precision PTQ lab for a toy AR/diffusion transformer."""

__version__ = "0.1.0"
