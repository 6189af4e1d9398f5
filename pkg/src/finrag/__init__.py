"""Multimodal retrieval-augmented QA over long financial documents."""

__version__ = "0.1.0"
