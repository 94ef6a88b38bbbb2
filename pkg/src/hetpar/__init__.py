"""Deterministic desk-scale simulator of heterogeneous-parallel multimodal training."""

__version__ = "0.1.0"
