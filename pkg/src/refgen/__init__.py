"""Retrieval-conditioned toy diffusion: data curation, sample synthesis, model, training, evaluation."""

__version__ = "0.1.0"
