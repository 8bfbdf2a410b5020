"""Factor-graph navigation with semantically gated landmark factors."""

from .errors import SemGateError
from .geometry import CameraIntrinsics, Pose3, Twist6
from .semantic import Context, GatePolicy, LabelHistogram, SemanticClass, default_policy

__all__ = [
    "CameraIntrinsics",
    "Context",
    "GatePolicy",
    "LabelHistogram",
    "Pose3",
    "SemanticClass",
    "SemGateError",
    "Twist6",
    "default_policy",
]
