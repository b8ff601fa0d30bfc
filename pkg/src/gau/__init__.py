"""Generative adversarial U-Net: conditional WGAN-GP image augmentation."""

__version__ = "0.1.0"
