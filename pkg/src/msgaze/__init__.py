"""Multistream gaze estimation with anatomical eye-region isolation."""

__version__ = "0.1.0"
