"""Attention-probe heads on frozen embeddings, with evaluation statistics."""

__version__ = "0.1.0"
