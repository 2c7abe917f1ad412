"""Weak supervision for ephemeral gully detection: noisy VLM votes are
aggregated by a generative label model whose probabilistic labels train a
student classifier."""

__version__ = "0.1.0"
