"""Gated multimodal fusion embeddings: encoder, loss suite, adaptive loss
weighting, synthetic pair data, and top-K retrieval evaluation."""

__version__ = "0.1.0"
