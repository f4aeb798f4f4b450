"""Surgical perception: hand-eye tracking of an instrument and deformable
tissue tracking with a surfel map driven by an embedded deformation graph."""

from .geometry import AxisAngleTranslation, CameraIntrinsics, QuatTranslation, RigidTransform
from .pipeline import PipelineConfig, run_pipeline
from .solver import SolverConfig, lm_optimize
from .surfels import EDGraph, FusionConfig, Surfel, SurfelMap
from .tool_tracker import FilterConfig, ToolTracker

__all__ = [
    "AxisAngleTranslation",
    "CameraIntrinsics",
    "EDGraph",
    "FilterConfig",
    "FusionConfig",
    "PipelineConfig",
    "QuatTranslation",
    "RigidTransform",
    "SolverConfig",
    "Surfel",
    "SurfelMap",
    "ToolTracker",
    "lm_optimize",
    "run_pipeline",
]
