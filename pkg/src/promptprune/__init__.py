"""Prompt-conditioned pruning of a toy diffusion denoiser into a mixture of experts."""

__version__ = "0.1.0"
