"""Hierarchical part-based generative modeling of 3D vessel trees."""

__version__ = "0.1.0"
