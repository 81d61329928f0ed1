"""Anatomy-aware patch-graph contrastive pretraining for volumetric images."""

__version__ = "0.1.0"
