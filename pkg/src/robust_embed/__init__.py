"""Adversarially robust contrastive sentence embeddings at desk scale."""

__version__ = "0.1.0"
