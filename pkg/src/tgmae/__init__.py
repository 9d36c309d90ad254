"""Masked video autoencoders with text-guided masking and video-text contrastive training."""

__version__ = "0.1.0"
