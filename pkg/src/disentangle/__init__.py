"""Benchmark featurizers for attribute disentanglement on a trained micro-LM."""

__version__ = "0.1.0"
