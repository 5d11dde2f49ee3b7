"""Equivariant isometric embeddings of periodic metrics on R^n."""

__version__ = "0.1.0"
