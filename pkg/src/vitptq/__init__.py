"""Hessian-weighted post-training quantization for a toy Vision Transformer."""

__version__ = "0.1.0"
