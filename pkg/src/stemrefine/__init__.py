"""Self-refining stem-label cleanup and desk-scale source separation."""

__version__ = "0.1.0"
