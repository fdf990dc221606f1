"""Masked diffusion LM decoding with per-token early exits."""

__version__ = "0.1.0"
