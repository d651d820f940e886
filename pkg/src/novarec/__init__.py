"""Multi-behavior recommendation with latent positive discovery and bias-corrected fusion."""

__version__ = "0.1.0"
