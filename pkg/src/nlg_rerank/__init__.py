"""Candidate reranking for text generation: pairwise cross-encoder, pointwise baselines, metric oracles."""

__version__ = "0.1.0"
