"""Semantic and relational embeddings of a scientific citation corpus."""

__version__ = "0.1.0"
