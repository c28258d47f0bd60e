"""Segment-level long-prompt encoding, preference-score decomposition, and
gradient-reweighted reward fine-tuning for a toy conditional diffusion model."""

__version__ = "0.1.0"
