"""Panoramic depth map toolkit for 4D mesh correspondence and compression."""

__version__ = "0.1.0"
