"""RangeViT: range-image LiDAR segmentation with a ViT encoder, on numpy."""

__version__ = "0.1.0"
