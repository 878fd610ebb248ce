"""Constant-Q features and a dilated-convolution classifier for speech emotion recognition."""

__version__ = "0.1.0"
