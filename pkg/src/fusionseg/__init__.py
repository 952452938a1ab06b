"""Multiresolution fully convolutional networks for cloud and snow segmentation."""

__version__ = "0.1.0"
