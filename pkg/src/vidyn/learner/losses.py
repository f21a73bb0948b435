"""Differentiable preintegration losses.

The training signal for both residual networks comes from comparing
Euler-preintegrated motion deltas against ground-truth deltas over each
prediction span, with gradients flowing through the integration
recursion into the network output:

  thrust loss:  mean ||alpha - alpha_hat||^2 + ||beta - beta_hat||^2
  torque loss:  mean ||vec(gamma_hat^-1 (x) gamma)||^2

The torque path Euler-integrates the rigid-body rotational model
w_dot = J^-1 (tau + tau_res - w x J w) directly instead of passing
through the B-spline fit used at deployment; differentiating through
the LM fit is intentionally avoided (documented train/deploy
asymmetry).

Quaternions are w-first Hamilton; batches are leading dimensions.
"""

from __future__ import annotations

import torch


def quat_mul_t(q1: torch.Tensor, q2: torch.Tensor) -> torch.Tensor:
    w1, x1, y1, z1 = q1.unbind(-1)
    w2, x2, y2, z2 = q2.unbind(-1)
    return torch.stack(
        [
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ],
        dim=-1,
    )


def quat_conj_t(q: torch.Tensor) -> torch.Tensor:
    return q * torch.tensor([1.0, -1.0, -1.0, -1.0], dtype=q.dtype)


def quat_exp_t(v: torch.Tensor) -> torch.Tensor:
    """Exponential map: rotation vector (..., 3) -> unit quaternion (..., 4).

    Uses the series form of sin(t/2)/t near zero so the map stays
    differentiable at v = 0.
    """
    t2 = (v * v).sum(-1, keepdim=True)
    t = torch.sqrt(t2 + 1e-300)
    half = 0.5 * t
    small = t < 1e-6
    k = torch.where(small, 0.5 - t2 / 48.0, torch.sin(half) / t)
    w = torch.where(small.squeeze(-1), 1.0 - t2.squeeze(-1) / 8.0, torch.cos(half).squeeze(-1))
    return torch.cat([w.unsqueeze(-1), k * v], dim=-1)


def quat_rotate_t(q: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Rotate vectors (..., 3) by unit quaternions (..., 4)."""
    qv = q[..., 1:]
    w = q[..., :1]
    t = 2.0 * torch.cross(qv, v, dim=-1)
    return v + w * t + torch.cross(qv, t, dim=-1)


def preintegrate_thrust_torch(
    thrust: torch.Tensor,
    body_rates: torch.Tensor,
    f_res: torch.Tensor,
    dt: float,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Euler preintegration of the translational dynamics over one span.

    thrust: (B, n, 3) mass-normalized commands; body_rates: (B, n, 3);
    f_res: (B, 3) held constant over the span. Returns (alpha, beta),
    the position and velocity deltas in the span's start frame.
    """
    B, n, _ = thrust.shape
    alpha = torch.zeros(B, 3, dtype=thrust.dtype)
    beta = torch.zeros(B, 3, dtype=thrust.dtype)
    gamma = torch.zeros(B, 4, dtype=thrust.dtype)
    gamma[:, 0] = 1.0
    for i in range(n):
        f_world = quat_rotate_t(gamma, thrust[:, i] + f_res)
        alpha = alpha + beta * dt + 0.5 * f_world * dt * dt
        beta = beta + f_world * dt
        gamma = quat_mul_t(gamma, quat_exp_t(body_rates[:, i] * dt))
        gamma = gamma / gamma.norm(dim=-1, keepdim=True)
    return alpha, beta


def integrate_rotation_torch(
    torque: torch.Tensor,
    omega0: torch.Tensor,
    tau_res: torch.Tensor,
    inertia: torch.Tensor,
    dt: float,
) -> torch.Tensor:
    """Euler integration of w_dot = J^-1 (tau + tau_res - w x J w) from the
    gyro-initialized rate omega0; returns the orientation delta
    gamma_hat (B, 4) composed from quaternion increments."""
    B, n, _ = torque.shape
    omega = omega0
    gamma = torch.zeros(B, 4, dtype=torque.dtype)
    gamma[:, 0] = 1.0
    for i in range(n):
        gamma = quat_mul_t(gamma, quat_exp_t(omega * dt))
        gamma = gamma / gamma.norm(dim=-1, keepdim=True)
        torque_net = torque[:, i] + tau_res - torch.cross(omega, omega * inertia, dim=-1)
        omega = omega + dt * torque_net / inertia
    return gamma


def quat_error_sq(q_hat: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    """Squared vector part of the error quaternion q_hat^-1 (x) q, with a
    hemisphere fix to remove the double-cover sign ambiguity."""
    e = quat_mul_t(quat_conj_t(q_hat), q)
    sign = torch.where(e[..., :1] < 0.0, -1.0, 1.0)
    vec = sign * e[..., 1:]
    return (vec * vec).sum(-1)


def thrust_window_loss(
    model,
    buffers: torch.Tensor,
    span_thrust: torch.Tensor,
    span_rates: torch.Tensor,
    alpha_true: torch.Tensor,
    beta_true: torch.Tensor,
    dt: float,
) -> torch.Tensor:
    f_res = model(buffers)
    alpha_hat, beta_hat = preintegrate_thrust_torch(span_thrust, span_rates, f_res, dt)
    return (
        ((alpha_true - alpha_hat) ** 2).sum(-1) + ((beta_true - beta_hat) ** 2).sum(-1)
    ).mean()


def torque_window_loss(
    model,
    buffers: torch.Tensor,
    span_torque: torch.Tensor,
    omega0: torch.Tensor,
    gamma_true: torch.Tensor,
    inertia: torch.Tensor,
    dt: float,
) -> torch.Tensor:
    tau_res = model(buffers)
    gamma_hat = integrate_rotation_torch(span_torque, omega0, tau_res, inertia, dt)
    return quat_error_sq(gamma_hat, gamma_true).mean()
