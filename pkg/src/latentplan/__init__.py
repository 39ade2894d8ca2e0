"""Latent-action diffusion planning for offline decision-making on toy environments."""

__version__ = "0.1.0"
