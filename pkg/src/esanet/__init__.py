"""ESANet RGB-D semantic segmentation on a small numpy engine."""
__version__ = "0.1.0"
