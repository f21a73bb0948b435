"""Preintegrated motion terms for the sliding-window estimator.

Two families of factors are built here, both by Euler recursion at the
measurement rate over one state interval [t_k, t_k+1]:

* hybrid-dynamics preintegration: position/velocity/orientation deltas
  driven by the (residual-corrected) mass-normalized thrust and the
  body rates sampled from the fitted rotational-dynamics spline, plus the
  external-force estimate f_e computed as the mean difference between
  accelerometer and thrust measurements, all rotated into frame k;
* standard on-manifold IMU preintegration with accelerometer/gyroscope
  bias Jacobians.

Covariances are propagated through the linearized error-state system with
the local-perturbation convention q_true = q_hat * exp(delta_theta).
Residual weights are the inverse covariances with eigenvalues capped at
WEIGHT_CAP so that noiseless factors stay finite.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    hat,
    quat_conjugate,
    quat_multiply,
    quat_multiply_raw,
    quat_normalize,
    quat_to_rot,
    so3_exp,
    so3_right_jacobian,
)
from .state import RobotState

WEIGHT_CAP = 1e12  # max eigenvalue of any residual weight (1/unit^2)

SPAN_TOL = 1e-9  # s; residuals demand states matching the integrated span


class StreamError(ValueError):
    """Raised when measurement streams do not cover the span uniformly."""


def weight_from_covariance(P: np.ndarray, cap: float = WEIGHT_CAP) -> np.ndarray:
    """Inverse of a PSD covariance with eigenvalues of the weight capped.

    Zero (or tiny) covariance directions get weight exactly `cap` instead
    of infinity, keeping the normal equations finite for noiseless input.
    """
    P = 0.5 * (P + P.T)
    w, V = np.linalg.eigh(P)
    inv = np.where(w > 1.0 / cap, 1.0 / np.maximum(w, 1.0 / cap), cap)
    return (V * inv) @ V.T


def _check_streams(span_dt: float, *streams: np.ndarray) -> int:
    n = streams[0].shape[0]
    for s in streams:
        s = np.asarray(s)
        if s.shape != (n, 3):
            raise StreamError("measurement streams must share shape (n, 3)")
        if not np.all(np.isfinite(s)):
            raise StreamError("non-finite measurement sample")
    if n < 1:
        raise StreamError("span shorter than one integration step")
    if span_dt <= 0.0:
        raise StreamError("integration step must be positive")
    return n


@dataclass
class PreintegratedDynamics:
    """Thrust/body-rate preintegration over one state interval.

    alpha/beta/gamma are the preintegrated position, velocity, and
    orientation deltas in frame k; f_e is the mean external specific force
    in frame k. P is the 12x12 covariance over the error blocks
    [d_alpha, d_beta, d_theta, d_f_e]; J_fe_ba is the Jacobian of f_e
    w.r.t. the accelerometer bias (alpha/beta do not depend on it).
    """

    alpha: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray  # unit quaternion, frame k -> frame k+1
    f_e: np.ndarray
    P: np.ndarray  # (12, 12)
    J_fe_ba: np.ndarray  # (3, 3)
    bias_lin: np.ndarray  # accelerometer bias at linearization
    span: float  # t_{k+1} - t_k [s]
    step: float  # Euler step [s]
    n_steps: int

    def f_e_corrected(self, b_a: np.ndarray) -> np.ndarray:
        """External-force estimate first-order corrected to bias b_a."""
        return self.f_e + self.J_fe_ba @ (np.asarray(b_a) - self.bias_lin)

    def weight(self) -> np.ndarray:
        """Block-diagonal inverse covariance: 9x9 pose block, 3x3 force."""
        cached = getattr(self, "_weight_cache", None)
        if cached is None:
            cached = np.zeros((12, 12))
            cached[:9, :9] = weight_from_covariance(self.P[:9, :9])
            cached[9:, 9:] = weight_from_covariance(self.P[9:, 9:])
            object.__setattr__(self, "_weight_cache", cached)
        return cached


def preintegrate_dynamics(
    thrust: np.ndarray,
    body_rates: np.ndarray,
    accel: np.ndarray,
    bias_lin: np.ndarray,
    noise,
    dt: float,
    f_res: np.ndarray | None = None,
) -> PreintegratedDynamics:
    """Euler preintegration of the hybrid dynamics model.

    thrust rows are mass-normalized body thrust (already including any
    learned residual correction if f_res is None); body_rates come from
    the fitted rotational-dynamics spline; accel rows feed the external
    force estimate. All streams are uniform at step dt over the span.
    noise provides sigma_thrust, sigma_gyro, sigma_accel, sigma_bias_accel
    (per-sample stds; bias as a random-walk density).
    """
    thrust = np.atleast_2d(np.asarray(thrust, dtype=float))
    body_rates = np.atleast_2d(np.asarray(body_rates, dtype=float))
    accel = np.atleast_2d(np.asarray(accel, dtype=float))
    n = _check_streams(dt, thrust, body_rates, accel)
    bias_lin = np.asarray(bias_lin, dtype=float)
    f_res = np.zeros(3) if f_res is None else np.asarray(f_res, dtype=float)

    alpha = np.zeros(3)
    beta = np.zeros(3)
    gamma = np.array([1.0, 0.0, 0.0, 0.0])
    f_sum = np.zeros(3)
    J_fsum_ba = np.zeros((3, 3))

    # error state [d_alpha, d_beta, d_theta, d_fsum, d_b_a] (15)
    P = np.zeros((15, 15))
    var_ft = noise.sigma_thrust**2
    var_w = noise.sigma_gyro**2
    var_a = noise.sigma_accel**2
    var_ba = noise.sigma_bias_accel**2 * dt

    for i in range(n):
        R = quat_to_rot(gamma)
        f_i = thrust[i] + f_res
        inner = accel[i] - bias_lin - thrust[i] - f_res

        F = np.eye(15)
        F[0:3, 3:6] = np.eye(3) * dt
        F[0:3, 6:9] = -0.5 * R @ hat(f_i) * dt * dt
        F[3:6, 6:9] = -R @ hat(f_i) * dt
        F[6:9, 6:9] = so3_exp(body_rates[i] * dt).T
        F[9:12, 6:9] = -R @ hat(inner)
        F[9:12, 12:15] = -R

        # noise enters as [n_ft, n_w] on the pose block and
        # [n_a - n_ft, n_ba] on the force block
        GQG = np.zeros((15, 15))
        A = -0.5 * R * dt * dt  # alpha <- n_ft
        B = -R * dt  # beta <- n_ft
        C = R  # fsum <- +n_ft (and -n_a)
        RRT = R @ R.T  # = I, kept for clarity of the propagation terms
        GQG[0:3, 0:3] = var_ft * (A @ A.T)
        GQG[0:3, 3:6] = var_ft * (A @ B.T)
        GQG[3:6, 0:3] = GQG[0:3, 3:6].T
        GQG[3:6, 3:6] = var_ft * (B @ B.T)
        GQG[0:3, 9:12] = var_ft * (A @ C.T)
        GQG[9:12, 0:3] = GQG[0:3, 9:12].T
        GQG[3:6, 9:12] = var_ft * (B @ C.T)
        GQG[9:12, 3:6] = GQG[3:6, 9:12].T
        GQG[6:9, 6:9] = var_w * dt * dt * np.eye(3)
        GQG[9:12, 9:12] = (var_ft + var_a) * RRT
        GQG[12:15, 12:15] = var_ba * np.eye(3)
        P = F @ P @ F.T + GQG

        f_sum = f_sum + R @ inner
        J_fsum_ba = J_fsum_ba - R
        alpha = alpha + beta * dt + 0.5 * (R @ f_i) * dt * dt
        beta = beta + (R @ f_i) * dt
        dq = np.concatenate(([1.0], 0.5 * body_rates[i] * dt))
        gamma = quat_normalize(quat_multiply_raw(gamma, dq))

    # marginalize to [d_alpha, d_beta, d_theta, d_f_e]; f_e = f_sum / n
    T = np.zeros((12, 15))
    T[0:9, 0:9] = np.eye(9)
    T[9:12, 9:12] = np.eye(3) / n
    P12 = T @ P @ T.T
    return PreintegratedDynamics(
        alpha=alpha,
        beta=beta,
        gamma=quat_normalize(gamma),
        f_e=f_sum / n,
        P=0.5 * (P12 + P12.T),
        J_fe_ba=J_fsum_ba / n,
        bias_lin=bias_lin.copy(),
        span=n * dt,
        step=dt,
        n_steps=n,
    )


def dynamics_residual(
    state_k: RobotState,
    state_k1: RobotState,
    pre: PreintegratedDynamics,
    gravity: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Dynamics motion-constraint residual and its weight.

    Blocks: position (alpha - alpha_hat), velocity (beta - beta_hat),
    orientation (2 * vec of the error quaternion), and external force
    (f_e at k+1 minus the bias-corrected preintegrated estimate).
    """
    dt = state_k1.t - state_k.t
    if abs(dt - pre.span) > SPAN_TOL:
        raise ValueError(
            f"state interval {dt:.9f} s does not match preintegrated span {pre.span:.9f} s"
        )
    g = np.asarray(gravity, dtype=float)
    R_k = quat_to_rot(state_k.q)
    alpha = (
        R_k.T @ (state_k1.p - state_k.p - state_k.v * dt - 0.5 * g * dt * dt)
        - 0.5 * state_k.f_e * dt * dt
    )
    beta = R_k.T @ (state_k1.v - state_k.v - g * dt) - state_k.f_e * dt
    q_err = quat_multiply(
        quat_conjugate(pre.gamma),
        quat_multiply(quat_conjugate(state_k.q), state_k1.q),
    )
    r = np.concatenate(
        [
            alpha - pre.alpha,
            beta - pre.beta,
            2.0 * q_err[1:],
            state_k1.f_e - pre.f_e_corrected(state_k.b_a),
        ]
    )
    return r, pre.weight()


@dataclass
class PreintegratedImu:
    """Standard on-manifold IMU preintegration over one state interval.

    dp/dv/dq are the preintegrated deltas at the linearization biases;
    P is the 15x15 covariance over [d_p, d_v, d_theta, d_b_a, d_b_g];
    the J_* matrices are first-order bias-correction Jacobians.
    """

    dp: np.ndarray
    dv: np.ndarray
    dq: np.ndarray  # unit quaternion
    P: np.ndarray  # (15, 15)
    J_p_ba: np.ndarray
    J_p_bg: np.ndarray
    J_v_ba: np.ndarray
    J_v_bg: np.ndarray
    J_q_bg: np.ndarray
    bias_accel_lin: np.ndarray
    bias_gyro_lin: np.ndarray
    span: float
    step: float
    n_steps: int

    def corrected(self, b_a: np.ndarray, b_g: np.ndarray):
        """(dp, dv, dq) first-order corrected to the given biases."""
        dba = np.asarray(b_a) - self.bias_accel_lin
        dbg = np.asarray(b_g) - self.bias_gyro_lin
        dp = self.dp + self.J_p_ba @ dba + self.J_p_bg @ dbg
        dv = self.dv + self.J_v_ba @ dba + self.J_v_bg @ dbg
        dtheta = self.J_q_bg @ dbg
        dq = quat_multiply_raw(
            self.dq, np.concatenate(([1.0], 0.5 * dtheta))
        )
        return dp, dv, quat_normalize(dq)

    def weight(self) -> np.ndarray:
        cached = getattr(self, "_weight_cache", None)
        if cached is None:
            cached = weight_from_covariance(self.P)
            object.__setattr__(self, "_weight_cache", cached)
        return cached


def preintegrate_imu(
    accel: np.ndarray,
    gyro: np.ndarray,
    bias_accel: np.ndarray,
    bias_gyro: np.ndarray,
    noise,
    dt: float,
) -> PreintegratedImu:
    """Euler IMU preintegration with covariance and bias Jacobians."""
    accel = np.atleast_2d(np.asarray(accel, dtype=float))
    gyro = np.atleast_2d(np.asarray(gyro, dtype=float))
    n = _check_streams(dt, accel, gyro)
    b_a = np.asarray(bias_accel, dtype=float)
    b_g = np.asarray(bias_gyro, dtype=float)

    dp = np.zeros(3)
    dv = np.zeros(3)
    dq = np.array([1.0, 0.0, 0.0, 0.0])
    J_p_ba = np.zeros((3, 3))
    J_p_bg = np.zeros((3, 3))
    J_v_ba = np.zeros((3, 3))
    J_v_bg = np.zeros((3, 3))
    J_q_bg = np.zeros((3, 3))

    P = np.zeros((15, 15))
    var_a = noise.sigma_accel**2
    var_w = noise.sigma_gyro**2
    var_ba = noise.sigma_bias_accel**2 * dt
    var_bg = noise.sigma_bias_gyro**2 * dt

    for i in range(n):
        R = quat_to_rot(dq)
        a_i = accel[i] - b_a
        w_i = gyro[i] - b_g
        A = so3_exp(w_i * dt).T

        F = np.eye(15)
        F[0:3, 3:6] = np.eye(3) * dt
        F[0:3, 6:9] = -0.5 * R @ hat(a_i) * dt * dt
        F[0:3, 9:12] = -0.5 * R * dt * dt
        F[3:6, 6:9] = -R @ hat(a_i) * dt
        F[3:6, 9:12] = -R * dt
        F[6:9, 6:9] = A
        F[6:9, 12:15] = -np.eye(3) * dt
        GQG = np.zeros((15, 15))
        Ga = -R * dt
        Gp = -0.5 * R * dt * dt
        GQG[0:3, 0:3] = var_a * (Gp @ Gp.T)
        GQG[0:3, 3:6] = var_a * (Gp @ Ga.T)
        GQG[3:6, 0:3] = GQG[0:3, 3:6].T
        GQG[3:6, 3:6] = var_a * (Ga @ Ga.T)
        GQG[6:9, 6:9] = var_w * dt * dt * np.eye(3)
        GQG[9:12, 9:12] = var_ba * np.eye(3)
        GQG[12:15, 12:15] = var_bg * np.eye(3)
        P = F @ P @ F.T + GQG

        # bias Jacobians share the error-state transition
        J_p_ba = J_p_ba + J_v_ba * dt - 0.5 * R * dt * dt
        J_p_bg = J_p_bg + J_v_bg * dt - 0.5 * R @ hat(a_i) @ J_q_bg * dt * dt
        J_v_ba = J_v_ba - R * dt
        J_v_bg = J_v_bg - R @ hat(a_i) @ J_q_bg * dt
        J_q_bg = A @ J_q_bg - so3_right_jacobian(w_i * dt) * dt

        dp = dp + dv * dt + 0.5 * (R @ a_i) * dt * dt
        dv = dv + (R @ a_i) * dt
        dq = quat_normalize(
            quat_multiply_raw(dq, np.concatenate(([1.0], 0.5 * w_i * dt)))
        )

    return PreintegratedImu(
        dp=dp,
        dv=dv,
        dq=quat_normalize(dq),
        P=0.5 * (P + P.T),
        J_p_ba=J_p_ba,
        J_p_bg=J_p_bg,
        J_v_ba=J_v_ba,
        J_v_bg=J_v_bg,
        J_q_bg=J_q_bg,
        bias_accel_lin=b_a.copy(),
        bias_gyro_lin=b_g.copy(),
        span=n * dt,
        step=dt,
        n_steps=n,
    )


def imu_residual(
    state_k: RobotState,
    state_k1: RobotState,
    pre: PreintegratedImu,
    gravity: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Inertial residual (15-vector) and weight for one state interval.

    Blocks: position, velocity, orientation (2 * vec error quaternion),
    accelerometer-bias walk, gyroscope-bias walk.
    """
    dt = state_k1.t - state_k.t
    if abs(dt - pre.span) > SPAN_TOL:
        raise ValueError(
            f"state interval {dt:.9f} s does not match preintegrated span {pre.span:.9f} s"
        )
    g = np.asarray(gravity, dtype=float)
    R_k = quat_to_rot(state_k.q)
    dp, dv, dq = pre.corrected(state_k.b_a, state_k.b_g)
    r_p = R_k.T @ (state_k1.p - state_k.p - state_k.v * dt - 0.5 * g * dt * dt) - dp
    r_v = R_k.T @ (state_k1.v - state_k.v - g * dt) - dv
    q_err = quat_multiply(
        quat_conjugate(dq), quat_multiply(quat_conjugate(state_k.q), state_k1.q)
    )
    r = np.concatenate(
        [
            r_p,
            r_v,
            2.0 * q_err[1:],
            state_k1.b_a - state_k.b_a,
            state_k1.b_g - state_k.b_g,
        ]
    )
    return r, pre.weight()
