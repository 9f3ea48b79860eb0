"""Quantized distillation of compact speech-intent classifiers."""

__version__ = "0.1.0"
