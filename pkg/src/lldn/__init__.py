"""Lidar lane detection with global feature correlator backbones, at desk scale."""

__version__ = "0.1.0"
