"""Desk-scale progressive distillation of a promptable concept segmenter."""

__version__ = "0.1.0"
