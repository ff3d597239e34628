"""Interpretable-by-construction hate speech detection from LLM-extracted rationales."""

from .datasets import DatasetStats, Post, RationaleSpan
from .extraction import FeatureSet

__all__ = ["DatasetStats", "FeatureSet", "Post", "RationaleSpan"]
__version__ = "0.1.0"
