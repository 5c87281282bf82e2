"""Shared-encoder neighbourhood cross-attention segmentation of spatial
transcriptomics with histology features."""

__version__ = "0.1.0"
