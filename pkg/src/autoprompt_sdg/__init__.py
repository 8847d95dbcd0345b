"""Automatic box-prompt generation and prompt-fused decoding for single-source
domain-generalized segmentation, at desk scale."""

__version__ = "0.1.0"
