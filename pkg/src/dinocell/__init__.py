"""Self-distillation transfer-learning toolkit for multi-channel microscopy images."""

__version__ = "0.1.0"
