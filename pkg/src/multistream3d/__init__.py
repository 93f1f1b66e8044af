"""Multistream LiDAR + pseudo-point 3D object detection on a numpy sparse-tensor engine."""

from .config import RunConfig, load_config, toy_preset
from .geometry import Box3D
from .kitti_io import Calibration, GroundTruthObject, PointCloud
from .sparse import SparseTensor

__version__ = "0.1.0"

__all__ = ["Box3D", "Calibration", "GroundTruthObject", "PointCloud", "RunConfig", "SparseTensor",
           "load_config", "toy_preset", "__version__"]
