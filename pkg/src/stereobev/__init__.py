"""Stereo bird's-eye-view semantic layout estimation, end to end on a
self-contained synthetic benchmark: tensor engine, camera geometry, scene
simulator, models, metrics, dataset formats, and CLI."""

from . import autodiff, geometry, io, metrics, network, scenesim, training
from .errors import DataError, GraphError, HorizonError, NumericError

__all__ = ["autodiff", "geometry", "io", "metrics", "network", "scenesim",
           "training", "DataError", "GraphError", "HorizonError", "NumericError"]

__version__ = "0.1.0"
