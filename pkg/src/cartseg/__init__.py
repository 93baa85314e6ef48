"""Collaborative multi-agent 3D cartilage segmentation on synthetic knee phantoms."""

from .errors import CartsegError
from .volume import Cartilage, LabelVolume, RoiBox, Volume

__all__ = ["CartsegError", "Cartilage", "LabelVolume", "RoiBox", "Volume"]
__version__ = "0.1.0"
