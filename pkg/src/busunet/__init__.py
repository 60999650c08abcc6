"""BUSU-Net family of chained encoder-decoder networks for vessel segmentation."""

__version__ = "0.1.0"
