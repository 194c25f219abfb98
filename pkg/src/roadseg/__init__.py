"""Road-distress toolkit: synthetic image GAN, detection-head math,
mask-classification segmentation, dataset pipeline, and evaluation metrics."""

__version__ = "0.1.0"
