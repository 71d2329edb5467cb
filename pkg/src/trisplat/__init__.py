"""Differentiable triangle-soup splatting, multiview geometry optimization,
and level-of-detail planar abstraction on the CPU."""

from .camera import PinholeCamera, project_vertex
from .geometry import (
    LocalFrame,
    TangentTransform,
    TrianglePrimitive,
    bisect_longest_edge,
    edge_functions,
    local_frame,
    local_vertex_coords,
    subdivide_for_sorting,
    tangent_transform,
)
from .calibration import CalibrationModel, RansacDepthCalibrator, calibrate_depth_ransac
from .planes import (
    LodSchedule,
    PlanarPrimitive,
    RegionGrowingPlaneDetector,
    chamfer_distance,
    extract_lod_planes,
    sample_oriented_points,
)
from .renderer import RenderSettings, RenderTarget, kernel_weight, ray_tangent_intersection, render
from .soup import AppearanceModel, GradientBuffers, TriangleSoup
from .surfels import backward_appearance, render_appearance, spawn_gaussians
from .train import TrainConfig, Trainer, TriangleSoupReconstructor, init_from_points

__version__ = "0.1.0"

__all__ = [
    "AppearanceModel",
    "CalibrationModel",
    "GradientBuffers",
    "LocalFrame",
    "LodSchedule",
    "PinholeCamera",
    "PlanarPrimitive",
    "RansacDepthCalibrator",
    "RegionGrowingPlaneDetector",
    "RenderSettings",
    "RenderTarget",
    "TangentTransform",
    "TrainConfig",
    "Trainer",
    "TrianglePrimitive",
    "TriangleSoup",
    "TriangleSoupReconstructor",
    "backward_appearance",
    "bisect_longest_edge",
    "calibrate_depth_ransac",
    "chamfer_distance",
    "edge_functions",
    "extract_lod_planes",
    "init_from_points",
    "kernel_weight",
    "local_frame",
    "local_vertex_coords",
    "project_vertex",
    "ray_tangent_intersection",
    "render",
    "render_appearance",
    "sample_oriented_points",
    "spawn_gaussians",
    "subdivide_for_sorting",
    "tangent_transform",
]
