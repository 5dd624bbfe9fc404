"""Grid-constrained superpixel segmentation with a fully convolutional network."""

__version__ = "0.1.0"
