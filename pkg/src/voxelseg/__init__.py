"""Volumetric lesion segmentation: harmonization, 3D CNNs, inference and evaluation statistics."""

__version__ = "0.1.0"
