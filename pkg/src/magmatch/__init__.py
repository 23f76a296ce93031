"""Magnetic vector field mapping, keypoint description and map registration."""

__version__ = "0.1.0"

from .geometry import RigidTransform  # noqa: E402
