"""Desk-scale label/text-conditioned latent diffusion for Foley sound synthesis."""

__version__ = "0.1.0"
