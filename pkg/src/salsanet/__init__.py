"""LiDAR point-cloud segmentation into road, vehicle and background with SalsaNet."""

__version__ = "0.1.0"
