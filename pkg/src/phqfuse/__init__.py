"""Micro-scale multimodal PHQ-8 scoring pipeline."""

__version__ = "0.1.0"
