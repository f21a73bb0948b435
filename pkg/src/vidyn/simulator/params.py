"""Parameter containers for the synthetic quadrotor world."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

WindField = Callable[[np.ndarray], np.ndarray]

DRAGBOARD_AREA = 0.22 * 0.16  # 22 cm x 16 cm flat plate, board normal on body y


@dataclass
class QuadrotorParams:
    """Physical quadrotor parameters.

    Aero constants follow a square-prism fuselage (drag coefficient 2.0),
    a linear induced-drag propeller model (k = 0.145 Ns/m), and an optional
    flat-plate dragboard with normal along the body y axis.
    """

    mass: float = 0.75  # kg
    inertia: np.ndarray = field(
        default_factory=lambda: np.array([2.5e-3, 2.1e-3, 4.3e-3])
    )  # kg m^2, diagonal
    k_induced: float = 0.145  # N s/m
    area_fuselage: float = 0.015  # m^2
    cd_fuselage: float = 2.0
    area_board: float = 0.0  # m^2; DRAGBOARD_AREA when a board is mounted
    rho: float = 1.204  # kg/m^3

    def __post_init__(self):
        self.inertia = np.asarray(self.inertia, dtype=float)
        if self.mass <= 0.0:
            raise ValueError("mass must be positive")
        if np.any(self.inertia <= 0.0):
            raise ValueError("inertia entries must be positive")
        if self.area_fuselage < 0.0 or self.area_board < 0.0:
            raise ValueError("areas must be non-negative")
        if self.rho <= 0.0:
            raise ValueError("air density must be positive")

    @property
    def J(self) -> np.ndarray:
        return np.diag(self.inertia)

    @property
    def J_inv(self) -> np.ndarray:
        return np.diag(1.0 / self.inertia)


@dataclass
class WorldParams:
    """Gravity, ambient wind field, and optional constant disturbance.

    constant_force is a mass-normalized world-frame force [N/kg] acting on
    the vehicle in addition to aerodynamics (payload / pulling-rope style
    disturbance).
    """

    gravity: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -9.81]))
    wind: Optional[WindField] = None
    constant_force: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.gravity = np.asarray(self.gravity, dtype=float)
        self.constant_force = np.asarray(self.constant_force, dtype=float)

    def wind_at(self, p: np.ndarray) -> np.ndarray:
        if self.wind is None:
            return np.zeros(3)
        return np.asarray(self.wind(p), dtype=float)


@dataclass
class NoiseParams:
    """Sensor noise configuration.

    sigma_accel / sigma_gyro / sigma_thrust / sigma_torque / sigma_pixel are
    per-sample standard deviations; sigma_bias_accel / sigma_bias_gyro are
    random-walk densities (the discrete bias increment has standard
    deviation sigma * sqrt(dt)). All zeros yield bit-deterministic
    noiseless streams.
    """

    sigma_accel: float = 0.0  # m/s^2
    sigma_gyro: float = 0.0  # rad/s
    sigma_bias_accel: float = 0.0  # m/s^2 / sqrt(s)
    sigma_bias_gyro: float = 0.0  # rad/s / sqrt(s)
    sigma_thrust: float = 0.0  # N/kg
    sigma_torque: float = 0.0  # N m
    sigma_pixel: float = 0.0  # px
    seed: int = 0

    def __post_init__(self):
        for name in (
            "sigma_accel",
            "sigma_gyro",
            "sigma_bias_accel",
            "sigma_bias_gyro",
            "sigma_thrust",
            "sigma_torque",
            "sigma_pixel",
        ):
            if getattr(self, name) < 0.0:
                raise ValueError(f"{name} must be non-negative")


@dataclass
class CameraParams:
    """Pinhole camera, rigidly mounted looking down (optical axis = -body z)."""

    fx: float = 320.0
    fy: float = 320.0
    cx: float = 320.0
    cy: float = 240.0
    width: int = 640
    height: int = 480
    rate: float = 30.0  # Hz
    min_depth: float = 0.1  # m, visibility cutoff in front of the camera

    @property
    def R_BC(self) -> np.ndarray:
        # camera x -> body x, camera y -> -body y, camera z -> -body z
        return np.diag([1.0, -1.0, -1.0])

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])
