"""Contrastive pretraining + hypercolumn projectors for few-shot part segmentation."""

__version__ = "0.1.0"
