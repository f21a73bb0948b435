"""Core state containers shared by the simulator, preintegration, and estimator."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import quat_identity, quat_normalize


@dataclass
class RobotState:
    """Full per-node estimate of the vehicle.

    Attributes:
        t: timestamp [s]
        p: position in the world frame [m]
        q: unit quaternion, body to world (w-first)
        v: linear velocity in the world frame [m/s]
        b_a: accelerometer bias [m/s^2]
        b_g: gyroscope bias [rad/s]
        f_e: mass-normalized external force in the body frame [N/kg]
    """

    t: float = 0.0
    p: np.ndarray = field(default_factory=lambda: np.zeros(3))
    q: np.ndarray = field(default_factory=quat_identity)
    v: np.ndarray = field(default_factory=lambda: np.zeros(3))
    b_a: np.ndarray = field(default_factory=lambda: np.zeros(3))
    b_g: np.ndarray = field(default_factory=lambda: np.zeros(3))
    f_e: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=float)
        self.q = quat_normalize(np.asarray(self.q, dtype=float))
        self.v = np.asarray(self.v, dtype=float)
        self.b_a = np.asarray(self.b_a, dtype=float)
        self.b_g = np.asarray(self.b_g, dtype=float)
        self.f_e = np.asarray(self.f_e, dtype=float)
        for name in ("p", "q", "v", "b_a", "b_g", "f_e"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"non-finite entries in RobotState.{name}")

    def copy(self) -> "RobotState":
        return RobotState(
            t=self.t,
            p=self.p.copy(),
            q=self.q.copy(),
            v=self.v.copy(),
            b_a=self.b_a.copy(),
            b_g=self.b_g.copy(),
            f_e=self.f_e.copy(),
        )
