"""Mask-conditional StyleGAN2 augmentation for medical image segmentation."""

__version__ = "0.1.0"
