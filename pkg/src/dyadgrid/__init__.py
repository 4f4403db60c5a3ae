"""Dyadic cube systems, adapted grids and Haar rearrangement operators on
discretized spaces of homogeneous type."""

from .model import SpaceModel, make_model, quasidistance
from .cubes import Cube, DyadicSystem, Region, build_system

__all__ = [
    "SpaceModel",
    "make_model",
    "quasidistance",
    "Cube",
    "DyadicSystem",
    "Region",
    "build_system",
]

__version__ = "0.1.0"
