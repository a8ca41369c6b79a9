"""Functional structural equation models with latent Gaussian-process factors."""
__version__ = "0.1.0"
