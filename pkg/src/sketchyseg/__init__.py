"""Instance segmentation of point clouds trained from loose bounding boxes."""

__version__ = "0.1.0"
