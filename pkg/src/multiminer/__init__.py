"""Multi-step adaptive region mining from image-level labels, on synthetic scenes."""

__version__ = "0.1.0"
