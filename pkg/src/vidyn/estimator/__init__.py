"""Sliding-window MAP estimator over visual, inertial, and dynamics factors."""

from .factors import (
    DynamicsFactor,
    ForceWalkFactor,
    ImuFactor,
    PriorFactor,
    VisualFactor,
    projection_jacobians,
)
from .pipeline import (
    MODES,
    EstimatorConfig,
    FrameResult,
    Pipeline,
    keyframe_policy,
    run_pipeline,
    triangulate_midpoint,
    write_estimate_csv,
)
from .problem import (
    FrameVisualBlock,
    GaugeDeficiencyError,
    DanglingVariableError,
    LMSettings,
    OptimizeReport,
    Problem,
    build_problem,
    huber_cost,
    marginalize,
    optimize,
)
from .window import (
    POSE_DOF,
    STATE_DOF,
    Keyframe,
    SlidingWindow,
    StateNode,
    pose_boxminus,
    pose_boxplus,
    state_boxminus,
    state_boxplus,
)

__all__ = [
    "DynamicsFactor",
    "ForceWalkFactor",
    "ImuFactor",
    "PriorFactor",
    "VisualFactor",
    "projection_jacobians",
    "MODES",
    "EstimatorConfig",
    "FrameResult",
    "Pipeline",
    "keyframe_policy",
    "run_pipeline",
    "triangulate_midpoint",
    "write_estimate_csv",
    "FrameVisualBlock",
    "GaugeDeficiencyError",
    "DanglingVariableError",
    "LMSettings",
    "OptimizeReport",
    "Problem",
    "build_problem",
    "huber_cost",
    "marginalize",
    "optimize",
    "POSE_DOF",
    "STATE_DOF",
    "Keyframe",
    "SlidingWindow",
    "StateNode",
    "pose_boxminus",
    "pose_boxplus",
    "state_boxminus",
    "state_boxplus",
]
