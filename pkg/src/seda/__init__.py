"""Semantic-edge domain adaptation on a deterministic synthetic two-domain benchmark."""

__version__ = "0.1.0"
