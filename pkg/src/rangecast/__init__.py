"""Forecast future LiDAR scans from past range images."""

__version__ = "0.1.0"
