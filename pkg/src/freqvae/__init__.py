"""Convolutional VAEs with frequency-domain losses and spectral evaluation."""

__version__ = "0.1.0"
