"""dgforge: physics-guided diffusion for dexterous grasp poses on toy hands and objects."""

from .geometry import (
    CylinderGeom,
    PointCloud,
    SpatialIndex,
    TriangleMesh,
    build_index,
    nearest,
    sample_surface,
    signed_distance_to_cloud,
    signed_distance_to_cylinder,
)
from .hand import (
    FkResult,
    HandPose,
    KinematicHandModel,
    default_hand,
    forward_kinematics,
    hand_from_description,
    orthonormalize_rot6d,
)

__all__ = [
    "CylinderGeom", "PointCloud", "SpatialIndex", "TriangleMesh",
    "build_index", "nearest", "sample_surface",
    "signed_distance_to_cloud", "signed_distance_to_cylinder",
    "FkResult", "HandPose", "KinematicHandModel", "default_hand",
    "forward_kinematics", "hand_from_description", "orthonormalize_rot6d",
]
