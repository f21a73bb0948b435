"""Sensor stream synthesis from a ground-truth trajectory."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..geometry import quat_to_rot
from .dynamics import BASE_RATE, CommandSchedule, TruthTrajectory
from .params import CameraParams, NoiseParams, QuadrotorParams


@dataclass
class FrameObservations:
    """Landmark observations of one camera frame."""

    t: float
    ids: np.ndarray  # (n,)
    pixels: np.ndarray  # (n, 2)


@dataclass
class MeasurementStream:
    """All synthetic sensor streams of one run."""

    imu_times: np.ndarray
    accel: np.ndarray
    gyro: np.ndarray
    bias_accel: np.ndarray  # true bias trace at IMU rate
    bias_gyro: np.ndarray
    cmd_times: np.ndarray
    thrust_meas: np.ndarray
    torque_meas: np.ndarray
    frames: list  # list[FrameObservations]

    def imu_slice(self, t0: float, t1: float) -> slice:
        lo = int(np.searchsorted(self.imu_times, t0 - 1e-9))
        hi = int(np.searchsorted(self.imu_times, t1 + 1e-9))
        return slice(lo, hi)


def make_landmarks(num: int, box_min, box_max, seed: int) -> np.ndarray:
    """Uniform random landmark cloud inside an axis-aligned box."""
    rng = np.random.default_rng(seed)
    box_min = np.asarray(box_min, dtype=float)
    box_max = np.asarray(box_max, dtype=float)
    return rng.uniform(box_min, box_max, size=(num, 3))


def project_landmarks(
    p_w: np.ndarray,
    q_wb: np.ndarray,
    landmarks: np.ndarray,
    camera: CameraParams,
) -> tuple[np.ndarray, np.ndarray]:
    """Visible landmark ids and their pixel projections for one pose."""
    R_wb = quat_to_rot(q_wb)
    R_wc = R_wb @ camera.R_BC
    pts_c = (landmarks - p_w) @ R_wc  # rows: landmark in camera frame
    visible = pts_c[:, 2] > camera.min_depth
    u = camera.fx * pts_c[:, 0] / pts_c[:, 2] + camera.cx
    v = camera.fy * pts_c[:, 1] / pts_c[:, 2] + camera.cy
    inside = (u >= 0) & (u < camera.width) & (v >= 0) & (v < camera.height)
    mask = visible & inside
    ids = np.nonzero(mask)[0]
    return ids, np.column_stack([u[mask], v[mask]])


def synthesize_sensors(
    truth: TruthTrajectory,
    commands: CommandSchedule,
    noise: NoiseParams,
    camera: Optional[CameraParams] = None,
    landmarks: Optional[np.ndarray] = None,
    imu_rate: float = 200.0,
) -> MeasurementStream:
    """Generate IMU, thrust/torque, and landmark measurements.

    Accelerometer reads the applied specific force in the body frame plus
    a random-walk bias and white noise; gyroscope reads the body rate
    likewise. Thrust/torque measurements are the scheduled commands plus
    white noise. All randomness comes from one generator seeded by
    noise.seed, so identical configs give bitwise-identical streams.
    """
    rng = np.random.default_rng(noise.seed)
    duration = truth.times[-1]
    step = 1.0 / imu_rate
    n_imu = int(np.floor(duration / step + 1e-9)) + 1
    sub = int(round(BASE_RATE / imu_rate))

    imu_times = np.arange(n_imu) / imu_rate
    idx = (np.arange(n_imu) * sub).astype(int)
    spec_force = truth.f_specific[idx]
    body_rate = truth.omega[idx]

    b_a = np.zeros((n_imu, 3))
    b_g = np.zeros((n_imu, 3))
    if noise.sigma_bias_accel > 0 or noise.sigma_bias_gyro > 0:
        da = rng.standard_normal((n_imu - 1, 3)) * noise.sigma_bias_accel * np.sqrt(step)
        dg = rng.standard_normal((n_imu - 1, 3)) * noise.sigma_bias_gyro * np.sqrt(step)
        b_a[1:] = np.cumsum(da, axis=0)
        b_g[1:] = np.cumsum(dg, axis=0)

    accel = spec_force + b_a
    gyro = body_rate + b_g
    if noise.sigma_accel > 0:
        accel = accel + rng.standard_normal((n_imu, 3)) * noise.sigma_accel
    if noise.sigma_gyro > 0:
        gyro = gyro + rng.standard_normal((n_imu, 3)) * noise.sigma_gyro

    thrust_meas = commands.thrust.copy()
    torque_meas = commands.torque.copy()
    if noise.sigma_thrust > 0:
        thrust_meas = thrust_meas + rng.standard_normal(thrust_meas.shape) * noise.sigma_thrust
    if noise.sigma_torque > 0:
        torque_meas = torque_meas + rng.standard_normal(torque_meas.shape) * noise.sigma_torque

    frames: list[FrameObservations] = []
    if camera is not None and landmarks is not None and landmarks.size:
        n_cam = int(np.floor(duration * camera.rate + 1e-9)) + 1
        for k in range(n_cam):
            t = k / camera.rate
            p, q, _, _ = truth.state_at(t)
            ids, px = project_landmarks(p, q, landmarks, camera)
            if noise.sigma_pixel > 0 and ids.size:
                px = px + rng.standard_normal(px.shape) * noise.sigma_pixel
            frames.append(FrameObservations(t=t, ids=ids, pixels=px))

    return MeasurementStream(
        imu_times=imu_times,
        accel=accel,
        gyro=gyro,
        bias_accel=b_a,
        bias_gyro=b_g,
        cmd_times=commands.times.copy(),
        thrust_meas=thrust_meas,
        torque_meas=torque_meas,
        frames=frames,
    )


@dataclass
class SimOutput:
    """Everything one simulation run produces."""

    truth: TruthTrajectory
    commands: CommandSchedule
    measurements: MeasurementStream
    landmarks: Optional[np.ndarray]
    quad: QuadrotorParams
    noise: NoiseParams
    camera: Optional[CameraParams]
    meta: dict = field(default_factory=dict)
