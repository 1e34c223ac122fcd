"""Scene-aware radar object detection on range-azimuth heatmaps."""

__version__ = '0.1.0'
