"""Shortcut-targeted latent noise for a beta-VAE classifier, with its experiment tooling."""

__version__ = "0.1.0"

__all__ = ["__version__"]
