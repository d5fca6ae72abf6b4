"""Multiview-consistent semi-supervised 3D pose learning at desk scale."""

__version__ = "0.1.0"
