"""Particle-filter SLAM with GICP-guided particle corrections."""

__version__ = "0.1.0"
