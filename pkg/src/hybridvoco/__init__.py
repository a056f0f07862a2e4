"""Hybrid discrete/continuous visual token compression through a bottleneck token, at desk scale."""

__version__ = "0.1.0"
