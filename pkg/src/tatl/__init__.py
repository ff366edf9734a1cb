"""Task-agnostic transfer learning for skin-attribute segmentation at desk scale."""

__version__ = "0.1.0"
