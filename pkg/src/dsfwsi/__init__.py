"""Dual-branch self-supervised pretraining for multi-resolution slide images.

The package trains two unshared ResNet-18 encoders on paired low-level
(context) and high-level (target) patches with dense SimSiam-style losses and
a masked-jigsaw fusion stream, then transfers both encoders into a hooked
dual-branch encoder-decoder for tumour segmentation.
"""

__version__ = "0.1.0"
