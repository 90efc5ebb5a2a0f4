"""Salient-geometry point cloud registration on synthetic indoor scenes."""

from .cloud import PointCloud, RigidTransform
from .config import PipelineConfig
from .pipeline import register_pair
from .scenes import fig1_spec, generate_scene, make_pair

__version__ = "0.1.0"

__all__ = ["PointCloud", "RigidTransform", "PipelineConfig", "register_pair", "fig1_spec",
           "generate_scene", "make_pair", "__version__"]
