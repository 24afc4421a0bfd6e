"""Voxelwise perfusion-map regression from raw DSC-MRI sequences."""

__version__ = "0.1.0"
