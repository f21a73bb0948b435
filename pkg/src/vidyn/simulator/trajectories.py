"""Reference trajectories and closed-loop command generation.

Commands are produced by differential-flatness feedforward plus a PD
tracking loop: the desired specific force follows from the reference
acceleration and gravity, collective thrust is its magnitude, the desired
attitude aligns body z with it, and torque comes from a proportional
attitude loop with rate damping through the Euler equations. The feedback
keeps open-loop-unstable attitude dynamics on the reference in the
presence of unmodeled aero forces; the recorded commands are the commands
actually applied.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.interpolate import CubicSpline

from ..geometry import quat_normalize, quat_to_rot, rot_to_quat, so3_log
from .dynamics import BASE_RATE, CommandSchedule, DivergedError, TruthTrajectory
from .params import QuadrotorParams, WorldParams


class Reference:
    """Position reference with derivatives via central differences."""

    def __init__(self, pos_fn: Callable[[float], np.ndarray]):
        self._pos = pos_fn

    def pos(self, t: float) -> np.ndarray:
        return np.asarray(self._pos(t), dtype=float)

    def vel(self, t: float, h: float = 1e-4) -> np.ndarray:
        return (self.pos(t + h) - self.pos(t - h)) / (2 * h)

    def acc(self, t: float, h: float = 1e-4) -> np.ndarray:
        return (self.pos(t + h) - 2 * self.pos(t) + self.pos(t - h)) / (h * h)


def _time_warp(t: float, ramp: float) -> float:
    """Monotone C^2 time reparameterization starting at rest."""
    if ramp <= 0.0 or t >= ramp:
        return t - 0.5 * ramp if ramp > 0 else t
    x = t / ramp
    # integral of the quintic smoothstep 6x^5-15x^4+10x^3
    return ramp * (x ** 6 - 3 * x ** 5 + 2.5 * x ** 4)


def hover_reference(p0=(0.0, 0.0, 0.0)) -> Reference:
    p0 = np.asarray(p0, dtype=float)
    return Reference(lambda t: p0)


def circle_reference(radius=1.5, speed=2.0, center=(0.0, 0.0, 0.0), ramp=3.0) -> Reference:
    center = np.asarray(center, dtype=float)
    w = speed / radius

    def pos(t):
        th = w * _time_warp(t, ramp)
        return center + radius * np.array([np.cos(th) - 1.0, np.sin(th), 0.0])

    return Reference(pos)


def lemniscate_reference(scale=2.0, speed=2.0, center=(0.0, 0.0, 0.0), ramp=3.0) -> Reference:
    center = np.asarray(center, dtype=float)
    w = speed / scale

    def pos(t):
        th = w * _time_warp(t, ramp)
        return center + scale * np.array(
            [np.sin(th), np.sin(th) * np.cos(th), 0.0]
        )

    return Reference(pos)


def gp_random_reference(
    seed: int, duration: float, amplitude=1.2, length_scale=1.8, ramp=3.0
) -> Reference:
    """Smooth random position trajectory from a squared-exponential GP.

    Sampled on a coarse grid, interpolated with a cubic spline, and faded
    in with a quintic ramp so the vehicle starts at rest.
    """
    rng = np.random.default_rng(seed)
    grid = np.arange(-2.0, duration + 4.0, 0.5)
    K = np.exp(-0.5 * ((grid[:, None] - grid[None, :]) / length_scale) ** 2)
    L = np.linalg.cholesky(K + 1e-10 * np.eye(grid.size))
    samples = (L @ rng.standard_normal((grid.size, 3))) * amplitude
    spline = CubicSpline(grid, samples, axis=0)

    def fade(t):
        if ramp <= 0 or t >= ramp:
            return 1.0
        x = max(t, 0.0) / ramp
        return x ** 3 * (10 - 15 * x + 6 * x * x)

    base = spline(0.0)

    def pos(t):
        return (spline(t) - base) * fade(t)

    return Reference(pos)


@dataclass
class ControllerGains:
    kp_pos: float = 8.0
    kd_pos: float = 5.0
    kp_att: float = 200.0
    kd_att: float = 25.0


def fly_closed_loop(
    params: QuadrotorParams,
    world: WorldParams,
    reference: Reference,
    duration: float,
    cmd_rate: float = 100.0,
    gains: ControllerGains | None = None,
    thrust_meas_scale: float = 1.0,
    torque_meas_offset: np.ndarray | None = None,
) -> tuple[TruthTrajectory, CommandSchedule]:
    """Simulate a tracking flight; returns the truth trace and the commands.

    thrust_meas_scale / torque_meas_offset inject systematic actuation
    miscalibration: the *recorded* command is scaled/offset while the true
    applied input is unchanged (the recorded schedule is what downstream
    consumers treat as measurements).
    """
    gains = gains or ControllerGains()
    base_step = 1.0 / BASE_RATE
    sub = int(round(BASE_RATE / cmd_rate))
    if abs(sub * cmd_rate - BASE_RATE) > 1e-9:
        raise ValueError("command rate must divide the integrator rate")
    n_cmd = int(round(duration * cmd_rate))
    g = world.gravity
    m = params.mass
    J = params.inertia

    # initial state on the reference, attitude aligned with desired thrust
    p = reference.pos(0.0)
    v = reference.vel(0.0)
    a0 = reference.acc(0.0)
    R = _attitude_from_force(a0 - g)
    q = rot_to_quat(R)
    om = np.zeros(3)

    from ..geometry import quat_multiply_raw  # local import to avoid cycle noise
    from .aero import wind_force_truth

    n_total = n_cmd * sub + 1
    times = np.empty(n_total)
    P = np.empty((n_total, 3)); Q = np.empty((n_total, 4)); V = np.empty((n_total, 3))
    OM = np.empty((n_total, 3)); FS = np.empty((n_total, 3))
    FA = np.empty((n_total, 3)); FW = np.empty((n_total, 3)); TQ = np.empty((n_total, 3))
    cmd_times = np.empty(n_cmd)
    cmd_thrust = np.empty((n_cmd, 3))
    cmd_torque = np.empty((n_cmd, 3))

    R_des_prev = R
    idx = 0
    for c in range(n_cmd):
        t_c = c / cmd_rate
        # flatness feedforward + PD feedback
        a_des = (
            reference.acc(t_c)
            + gains.kp_pos * (reference.pos(t_c) - p)
            + gains.kd_pos * (reference.vel(t_c) - v)
        )
        f_des = a_des - g
        T = np.linalg.norm(f_des)
        R_des = _attitude_from_force(f_des)
        om_ff = so3_log(R_des_prev.T @ R_des) * cmd_rate
        R_des_prev = R_des
        R_now = quat_to_rot(q)
        e_R = 0.5 * _vee(R_des.T @ R_now - R_now.T @ R_des)
        alpha_des = -gains.kp_att * e_R - gains.kd_att * (om - R_now.T @ R_des @ om_ff)
        torque = J * alpha_des + np.cross(om, J * om)
        thrust = np.array([0.0, 0.0, T])

        cmd_times[c] = t_c
        cmd_thrust[c] = thrust * thrust_meas_scale
        cmd_torque[c] = torque + (torque_meas_offset if torque_meas_offset is not None else 0.0)

        def deriv(p_, q_, v_, om_):
            Rb = quat_to_rot(q_)
            v_body = Rb.T @ v_
            wind_body = Rb.T @ world.wind_at(p_)
            f_aero, f_wind = wind_force_truth(v_body, wind_body, params)
            f_wind = f_wind + m * (Rb.T @ world.constant_force)
            f_body = thrust + (f_aero + f_wind) / m
            dp = v_
            dv = Rb @ f_body + g
            dq = 0.5 * quat_multiply_raw(q_, np.concatenate(([0.0], om_)))
            dom = (torque - np.cross(om_, J * om_)) / J
            return dp, dv, dq, dom, f_body, f_aero, f_wind

        for s in range(sub):
            # divide (not multiply by the step) so timestamps land bitwise
            # on the same doubles as k / imu_rate etc.
            t = (c * sub + s) / BASE_RATE
            d1 = deriv(p, q, v, om)
            times[idx], P[idx], Q[idx], V[idx], OM[idx] = t, p, q, v, om
            FS[idx], FA[idx], FW[idx], TQ[idx] = d1[4], d1[5], d1[6], torque
            idx += 1
            h = base_step
            d2 = deriv(p + 0.5 * h * d1[0], quat_normalize(q + 0.5 * h * d1[2]),
                       v + 0.5 * h * d1[1], om + 0.5 * h * d1[3])
            d3 = deriv(p + 0.5 * h * d2[0], quat_normalize(q + 0.5 * h * d2[2]),
                       v + 0.5 * h * d2[1], om + 0.5 * h * d2[3])
            d4 = deriv(p + h * d3[0], quat_normalize(q + h * d3[2]),
                       v + h * d3[1], om + h * d3[3])
            p = p + h / 6.0 * (d1[0] + 2 * d2[0] + 2 * d3[0] + d4[0])
            v = v + h / 6.0 * (d1[1] + 2 * d2[1] + 2 * d3[1] + d4[1])
            q = quat_normalize(q + h / 6.0 * (d1[2] + 2 * d2[2] + 2 * d3[2] + d4[2]))
            om = om + h / 6.0 * (d1[3] + 2 * d2[3] + 2 * d3[3] + d4[3])
        if not (np.all(np.isfinite(p)) and np.all(np.isfinite(om))):
            raise DivergedError((c + 1) / cmd_rate)

    # final sample
    t = n_cmd * sub / BASE_RATE
    Rb = quat_to_rot(q)
    v_body = Rb.T @ v
    wind_body = Rb.T @ world.wind_at(p)
    f_aero, f_wind = wind_force_truth(v_body, wind_body, params)
    f_wind = f_wind + m * (Rb.T @ world.constant_force)
    times[idx], P[idx], Q[idx], V[idx], OM[idx] = t, p, q, v, om
    FS[idx] = cmd_thrust[-1] / thrust_meas_scale + (f_aero + f_wind) / m
    FA[idx], FW[idx], TQ[idx] = f_aero, f_wind, cmd_torque[-1]

    truth = TruthTrajectory(times=times, p=P, q=Q, v=V, omega=OM,
                            f_specific=FS, f_aero=FA, f_wind=FW, torque_applied=TQ)
    schedule = CommandSchedule(times=cmd_times, thrust=cmd_thrust, torque=cmd_torque)
    return truth, schedule


def _attitude_from_force(f_des: np.ndarray, yaw: float = 0.0) -> np.ndarray:
    """Rotation whose body z axis carries the desired force, given yaw."""
    z_b = f_des / np.linalg.norm(f_des)
    x_c = np.array([np.cos(yaw), np.sin(yaw), 0.0])
    y_b = np.cross(z_b, x_c)
    y_b = y_b / np.linalg.norm(y_b)
    x_b = np.cross(y_b, z_b)
    return np.column_stack([x_b, y_b, z_b])


def _vee(M: np.ndarray) -> np.ndarray:
    return np.array([M[2, 1], M[0, 2], M[1, 0]])
