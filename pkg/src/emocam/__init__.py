"""Corpus-level CAM + object-detection explainability for CNN emotion classifiers."""

__version__ = "0.1.0"
