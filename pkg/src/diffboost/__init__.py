"""diffboost: diffusion-generated, patch-mixed data augmentation for segmentation."""

__version__ = "0.1.0"
