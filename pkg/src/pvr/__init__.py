"""Patch-to-volume reconstruction of motion-corrupted slice stacks."""

from .volgrid import Geometry, RigidTransform, Stack, Volume

__all__ = ["Geometry", "RigidTransform", "Stack", "Volume"]
__version__ = "0.1.0"
