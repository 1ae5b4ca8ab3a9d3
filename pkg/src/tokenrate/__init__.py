"""Differentiable per-block token compression rate search for Vision Transformers."""

__version__ = "0.1.0"
