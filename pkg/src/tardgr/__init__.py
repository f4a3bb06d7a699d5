"""Task-aware retrieval-augmented dynamic graph recommendation."""

__version__ = "0.1.0"
