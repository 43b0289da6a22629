"""Tenure-aligned behavioral personas: segmentation, analytics, and
persona-feature prediction models."""

__version__ = "0.1.0"
