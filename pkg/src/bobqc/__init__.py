"""Organ-label quality control, segmentation metrics and entropy test-time
adaptation for 3D label volumes."""

__version__ = "0.1.0"
