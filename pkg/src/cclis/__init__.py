"""Contrastive continual learning with importance-sampled replay."""

__version__ = "0.1.0"
