"""Closed-form rotations for low-bit quantization of activations and weights."""

__version__ = "0.1.0"
