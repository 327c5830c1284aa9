"""One-step diffusion super-resolution by consistency training and trajectory matching."""

__version__ = "0.1.0"
