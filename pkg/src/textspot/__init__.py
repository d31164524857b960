"""End-to-end scene text spotting toolkit."""

__version__ = "0.1.0"
