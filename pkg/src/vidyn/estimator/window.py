"""Sliding-window containers and on-manifold variable arithmetic.

The window holds up to K recent robot states (pose, velocity, biases,
external force; 18 tangent dof) chained by inertial and dynamics
factors, up to L older keyframe poses (6 tangent dof) that anchor
visual factors, the landmark set, and one marginalization prior.

Tangent conventions: position/velocity/bias/force blocks are additive;
orientation uses the local (right) perturbation q <- q (x) Exp(dtheta).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..geometry import (
    quat_conjugate,
    quat_from_axis_angle,
    quat_multiply_raw,
    quat_normalize,
    quat_to_axis_angle,
    quat_multiply,
)
from ..state import RobotState

STATE_DOF = 18  # [dp, dtheta, dv, db_a, db_g, df_e]
POSE_DOF = 6  # [dp, dtheta]


@dataclass
class StateNode:
    """One robot state in the window plus its incoming factors."""

    frame_id: int
    state: RobotState
    observations: dict = field(default_factory=dict)  # landmark id -> pixel (2,)
    is_keyframe: bool = False
    imu_pre: object = None  # PreintegratedImu from the previous node
    dyn_pre: object = None  # PreintegratedDynamics from the previous node


@dataclass
class Keyframe:
    """Pose-only node retained for visual factors after its state left."""

    frame_id: int
    t: float
    p: np.ndarray
    q: np.ndarray
    observations: dict = field(default_factory=dict)


@dataclass
class SlidingWindow:
    """All optimization variables of the current estimation problem."""

    max_keyframes: int = 10
    max_states: int = 5
    states: list = field(default_factory=list)  # list[StateNode], time order
    keyframes: list = field(default_factory=list)  # list[Keyframe], time order
    landmarks: dict = field(default_factory=dict)  # id -> world 3-vector
    prior: object = None  # PriorFactor or None

    def frames(self):
        """All nodes carrying observations, oldest first."""
        return list(self.keyframes) + list(self.states)

    def check_sizes(self):
        assert len(self.states) <= self.max_states
        assert len(self.keyframes) <= self.max_keyframes


def state_boxplus(s: RobotState, delta: np.ndarray) -> RobotState:
    out = s.copy()
    out.p = s.p + delta[0:3]
    out.q = quat_normalize(quat_multiply_raw(s.q, quat_from_axis_angle(delta[3:6])))
    out.v = s.v + delta[6:9]
    out.b_a = s.b_a + delta[9:12]
    out.b_g = s.b_g + delta[12:15]
    out.f_e = s.f_e + delta[15:18]
    return out


def state_boxminus(s: RobotState, s0: RobotState) -> np.ndarray:
    dtheta = quat_to_axis_angle(quat_multiply(quat_conjugate(s0.q), s.q))
    return np.concatenate(
        [s.p - s0.p, dtheta, s.v - s0.v, s.b_a - s0.b_a, s.b_g - s0.b_g, s.f_e - s0.f_e]
    )


def pose_boxplus(p: np.ndarray, q: np.ndarray, delta: np.ndarray):
    return (
        p + delta[0:3],
        quat_normalize(quat_multiply_raw(q, quat_from_axis_angle(delta[3:6]))),
    )


def pose_boxminus(p, q, p0, q0) -> np.ndarray:
    dtheta = quat_to_axis_angle(quat_multiply(quat_conjugate(q0), q))
    return np.concatenate([p - p0, dtheta])
