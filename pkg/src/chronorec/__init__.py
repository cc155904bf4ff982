"""Timestamp-aware sequential recommendation with a diffusion item generator
and joint next-interaction-time prediction."""

__version__ = "0.1.0"
