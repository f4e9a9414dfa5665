"""Decoupled sentence-pair scoring: a cross-attentive teacher distilled into a Siamese student."""

__version__ = "0.1.0"
