"""Diffusion-autoencoder codec for sound effects at ultra-low bitrates."""

__version__ = "0.1.0"
