"""Sketch-driven video colorization with a dynamic global-local memory,
a color-consistency reward, and overlap latent fusion, at desk scale."""

__version__ = "0.1.0"
