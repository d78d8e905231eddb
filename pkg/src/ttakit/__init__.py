"""Instance-aware test-time augmentation toolkit."""

__version__ = "0.1.0"
