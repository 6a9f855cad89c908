"""Crack segmentation toolkit: probability-map binarization, evaluation and a small hierarchical CNN."""

__version__ = "0.1.0"
