"""Degradation-aware diffusion data synthesis and restoration toolkit."""

__version__ = "0.1.0"
