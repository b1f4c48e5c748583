"""Desk-scale bench for concept-erasure robustness on a toy diffusion model."""

__version__ = "0.1.0"
