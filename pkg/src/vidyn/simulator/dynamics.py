"""Ground-truth rigid-body integration of the quadrotor dynamics.

The truth integrator runs RK4 at a small fixed step on the full 6-DoF
model: translational dynamics driven by mass-normalized thrust plus the
first-principles aero force (including wind), rotational dynamics driven
by commanded torque through the Euler equations. Every aero-force
evaluation is logged in call order so a run can be replayed from the
logged forces alone (closure testing).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from ..geometry import quat_multiply_raw, quat_normalize, quat_to_rot
from .aero import wind_force_truth
from .params import QuadrotorParams, WorldParams

BASE_RATE = 3000.0  # Hz; 200 Hz IMU, 100/200 Hz commands, 30 Hz camera all divide it


class CommandGapError(ValueError):
    """Raised when the command schedule does not cover a requested time."""


class DivergedError(RuntimeError):
    """Raised when the integrated state turns non-finite."""

    def __init__(self, t: float):
        super().__init__(f"non-finite state at t={t:.6f} s")
        self.t = t


@dataclass
class CommandSchedule:
    """Zero-order-hold thrust/torque commands.

    thrust rows are mass-normalized body-frame force vectors [N/kg]
    (nominally [0, 0, T]); torque rows are body torques [N m].
    """

    times: np.ndarray
    thrust: np.ndarray
    torque: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.thrust = np.atleast_2d(np.asarray(self.thrust, dtype=float))
        self.torque = np.atleast_2d(np.asarray(self.torque, dtype=float))
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("command times must be strictly increasing")

    @property
    def period(self) -> float:
        return float(np.median(np.diff(self.times))) if self.times.size > 1 else np.inf

    def index_at(self, t: float) -> int:
        i = int(np.searchsorted(self.times, t + 1e-12, side="right")) - 1
        if i < 0:
            raise CommandGapError(f"no command at t={t}")
        if t > self.times[i] + 2.5 * self.period:
            raise CommandGapError(f"command gap before t={t}")
        return i

    def at(self, t: float) -> tuple[np.ndarray, np.ndarray]:
        i = self.index_at(t)
        return self.thrust[i], self.torque[i]


@dataclass
class TruthTrajectory:
    """Dense ground-truth trace at the integrator rate."""

    times: np.ndarray
    p: np.ndarray
    q: np.ndarray
    v: np.ndarray
    omega: np.ndarray
    f_specific: np.ndarray  # applied specific force, body frame [N/kg]
    f_aero: np.ndarray  # still-air aero force, body frame [N]
    f_wind: np.ndarray  # wind contribution, body frame [N]
    torque_applied: np.ndarray  # body torque from commands [N m]

    def state_at(self, t: float) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """(p, q, v, omega) linearly interpolated at t (slerp-free; the
        integrator step is small enough that nlerp is exact to ~1e-9)."""
        i = int(np.clip(np.searchsorted(self.times, t) - 1, 0, self.times.size - 2))
        h = self.times[i + 1] - self.times[i]
        a = float(np.clip((t - self.times[i]) / h, 0.0, 1.0))
        p = (1 - a) * self.p[i] + a * self.p[i + 1]
        v = (1 - a) * self.v[i] + a * self.v[i + 1]
        w = (1 - a) * self.omega[i] + a * self.omega[i + 1]
        q0, q1 = self.q[i], self.q[i + 1]
        if q0 @ q1 < 0:
            q1 = -q1
        q = quat_normalize((1 - a) * q0 + a * q1)
        return p, q, v, w

    def index_of(self, t: float) -> int:
        i = int(np.argmin(np.abs(self.times - t)))
        return i


ForceLog = list  # sequential [(f_aero_body, f_wind_body)] in evaluation order


def integrate_truth(
    params: QuadrotorParams,
    world: WorldParams,
    commands: CommandSchedule,
    duration: float,
    step: float = 1.0 / BASE_RATE,
    initial: Optional[dict] = None,
    force_log: Optional[ForceLog] = None,
    force_replay: Optional[ForceLog] = None,
) -> TruthTrajectory:
    """RK4 integration of the full quadrotor model over [0, duration].

    initial may override p, q, v, omega (defaults: rest at the origin,
    identity attitude). When force_log is given every aero evaluation is
    appended to it; when force_replay is given the aero model is bypassed
    and forces are consumed from the list in the same order, which
    reproduces a logged run exactly.
    """
    if step > 1e-3 + 1e-12:
        raise ValueError("integrator step must be <= 1e-3 s")
    n_steps = int(round(duration / step))
    init = initial or {}
    p = np.asarray(init.get("p", np.zeros(3)), dtype=float).copy()
    q = quat_normalize(np.asarray(init.get("q", [1.0, 0, 0, 0]), dtype=float))
    v = np.asarray(init.get("v", np.zeros(3)), dtype=float).copy()
    om = np.asarray(init.get("omega", np.zeros(3)), dtype=float).copy()
    m = params.mass
    J = params.inertia
    g = world.gravity

    replay_iter = iter(force_replay) if force_replay is not None else None

    # timestamps by division so they land bitwise on k / sensor_rate grids
    inv_step = 1.0 / step
    if abs(inv_step - round(inv_step)) < 1e-6:
        inv_step = float(round(inv_step))

    def aero_eval(p_, q_, v_):
        if replay_iter is not None:
            f_aero, f_wind = next(replay_iter)
            return f_aero, f_wind
        R = quat_to_rot(q_)
        v_body = R.T @ v_
        wind_body = R.T @ world.wind_at(p_)
        f_aero, f_wind = wind_force_truth(v_body, wind_body, params)
        if force_log is not None:
            force_log.append((f_aero, f_wind))
        return f_aero, f_wind

    def deriv(t_, p_, q_, v_, om_):
        thrust, torque = commands.at(t_)
        f_aero, f_wind = aero_eval(p_, q_, v_)
        R = quat_to_rot(q_)
        f_wind = f_wind + m * (R.T @ world.constant_force)
        f_body = thrust + (f_aero + f_wind) / m
        dp = v_
        dv = R @ f_body + g
        dq = 0.5 * quat_multiply_raw(q_, np.concatenate(([0.0], om_)))
        dom = (torque - np.cross(om_, J * om_)) / J
        return dp, dv, dq, dom, f_body, f_aero, f_wind, torque

    times = np.empty(n_steps + 1)
    P = np.empty((n_steps + 1, 3))
    Q = np.empty((n_steps + 1, 4))
    V = np.empty((n_steps + 1, 3))
    OM = np.empty((n_steps + 1, 3))
    FS = np.empty((n_steps + 1, 3))
    FA = np.empty((n_steps + 1, 3))
    FW = np.empty((n_steps + 1, 3))
    TQ = np.empty((n_steps + 1, 3))

    for k in range(n_steps + 1):
        t = k / inv_step
        d1 = deriv(t, p, q, v, om)
        times[k], P[k], Q[k], V[k], OM[k] = t, p, q, v, om
        FS[k], FA[k], FW[k], TQ[k] = d1[4], d1[5], d1[6], d1[7]
        if k == n_steps:
            break
        h = step
        d2 = deriv(
            t + 0.5 * h,
            p + 0.5 * h * d1[0],
            quat_normalize(q + 0.5 * h * d1[2]),
            v + 0.5 * h * d1[1],
            om + 0.5 * h * d1[3],
        )
        d3 = deriv(
            t + 0.5 * h,
            p + 0.5 * h * d2[0],
            quat_normalize(q + 0.5 * h * d2[2]),
            v + 0.5 * h * d2[1],
            om + 0.5 * h * d2[3],
        )
        d4 = deriv(
            t + h,
            p + h * d3[0],
            quat_normalize(q + h * d3[2]),
            v + h * d3[1],
            om + h * d3[3],
        )
        p = p + h / 6.0 * (d1[0] + 2 * d2[0] + 2 * d3[0] + d4[0])
        v = v + h / 6.0 * (d1[1] + 2 * d2[1] + 2 * d3[1] + d4[1])
        q = quat_normalize(q + h / 6.0 * (d1[2] + 2 * d2[2] + 2 * d3[2] + d4[2]))
        om = om + h / 6.0 * (d1[3] + 2 * d2[3] + 2 * d3[3] + d4[3])
        if not (np.all(np.isfinite(p)) and np.all(np.isfinite(v)) and np.all(np.isfinite(om))):
            raise DivergedError(t + h)

    return TruthTrajectory(
        times=times, p=P, q=Q, v=V, omega=OM,
        f_specific=FS, f_aero=FA, f_wind=FW, torque_applied=TQ,
    )
