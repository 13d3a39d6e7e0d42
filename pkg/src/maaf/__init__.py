"""Modality-agnostic attention fusion for image+text to image retrieval."""

__version__ = "0.1.0"
