"""Diagonal-Gaussian VAE with a conditional Glow-style pixel flow and a flow prior."""

__version__ = "0.1.0"
