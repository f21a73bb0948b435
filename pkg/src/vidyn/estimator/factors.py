"""Residual factors and their analytic Jacobians.

Each factor linearizes as r(x + delta) ~ r + sum_i J_i delta_i with a
symmetric positive (semi-)definite weight W; the solver accumulates
J^T W J and J^T W r. Variable keys are ("s", frame_id) for full robot
states, ("kf", frame_id) for keyframe poses, and ("lm", id) for
landmarks. State tangent ordering is [dp, dtheta, dv, db_a, db_g, df_e].
"""

from __future__ import annotations

import numpy as np

from ..geometry import hat, quat_to_rot
from ..preintegration import dynamics_residual, imu_residual
from .window import STATE_DOF

_I3 = np.eye(3)
_I3.setflags(write=False)


def so3_right_jacobian_inv(phi: np.ndarray) -> np.ndarray:
    """Inverse right Jacobian of SO(3)."""
    theta = float(np.linalg.norm(phi))
    H = hat(phi)
    if theta < 1e-6:
        return np.eye(3) + 0.5 * H + H @ H / 12.0
    c = 1.0 / theta**2 - (1.0 + np.cos(theta)) / (2.0 * theta * np.sin(theta))
    return np.eye(3) + 0.5 * H + c * (H @ H)


def _qerr_maps(r_q: np.ndarray):
    """Perturbation maps for the residual r = 2 * vec(q_err).

    With a = q_err (canonical, w >= 0), a right-multiplied increment
    Exp(dtheta) changes r by (a_w I + hat(a_v)) dtheta and a
    left-multiplied one by (a_w I - hat(a_v)) dtheta. Returns
    (right_map, left_map) reconstructed from the residual itself.
    """
    a_v = 0.5 * r_q
    a_w = np.sqrt(max(1.0 - float(a_v @ a_v), 0.0))
    H = hat(a_v)
    return a_w * _I3 + H, a_w * _I3 - H


class ImuFactor:
    """Preintegrated-IMU constraint between consecutive states."""

    def __init__(self, prev_id: int, next_id: int, pre, gravity: np.ndarray):
        self.prev_id = prev_id
        self.next_id = next_id
        self.pre = pre
        self.gravity = np.asarray(gravity, dtype=float)

    def keys(self):
        return [("s", self.prev_id), ("s", self.next_id)]

    def linearize(self, get_state):
        sk = get_state(("s", self.prev_id))
        sk1 = get_state(("s", self.next_id))
        r, W = imu_residual(sk, sk1, self.pre, self.gravity)
        dt = sk1.t - sk.t
        R_k = quat_to_rot(sk.q)
        R_k1 = quat_to_rot(sk1.q)
        g = self.gravity
        u_p = sk1.p - sk.p - sk.v * dt - 0.5 * g * dt * dt
        u_v = sk1.v - sk.v - g * dt
        E_r, E_l = _qerr_maps(r[6:9])

        Jk = np.zeros((15, STATE_DOF))
        Jk1 = np.zeros((15, STATE_DOF))
        # position block
        Jk[0:3, 0:3] = -R_k.T
        Jk[0:3, 3:6] = hat(R_k.T @ u_p)
        Jk[0:3, 6:9] = -R_k.T * dt
        Jk[0:3, 9:12] = -self.pre.J_p_ba
        Jk[0:3, 12:15] = -self.pre.J_p_bg
        Jk1[0:3, 0:3] = R_k.T
        # velocity block
        Jk[3:6, 3:6] = hat(R_k.T @ u_v)
        Jk[3:6, 6:9] = -R_k.T
        Jk[3:6, 9:12] = -self.pre.J_v_ba
        Jk[3:6, 12:15] = -self.pre.J_v_bg
        Jk1[3:6, 6:9] = R_k.T
        # orientation block
        Jk[6:9, 3:6] = -E_r @ R_k1.T @ R_k
        Jk[6:9, 12:15] = -E_l @ self.pre.J_q_bg
        Jk1[6:9, 3:6] = E_r
        # bias random walks
        Jk[9:12, 9:12] = -_I3
        Jk1[9:12, 9:12] = _I3
        Jk[12:15, 12:15] = -_I3
        Jk1[12:15, 12:15] = _I3
        return r, {("s", self.prev_id): Jk, ("s", self.next_id): Jk1}, W


class DynamicsFactor:
    """Hybrid-dynamics motion constraint between consecutive states."""

    def __init__(self, prev_id: int, next_id: int, pre, gravity: np.ndarray):
        self.prev_id = prev_id
        self.next_id = next_id
        self.pre = pre
        self.gravity = np.asarray(gravity, dtype=float)

    def keys(self):
        return [("s", self.prev_id), ("s", self.next_id)]

    def linearize(self, get_state):
        sk = get_state(("s", self.prev_id))
        sk1 = get_state(("s", self.next_id))
        r, W = dynamics_residual(sk, sk1, self.pre, self.gravity)
        dt = sk1.t - sk.t
        R_k = quat_to_rot(sk.q)
        R_k1 = quat_to_rot(sk1.q)
        g = self.gravity
        u_p = sk1.p - sk.p - sk.v * dt - 0.5 * g * dt * dt
        u_v = sk1.v - sk.v - g * dt
        E_r, _ = _qerr_maps(r[6:9])

        Jk = np.zeros((12, STATE_DOF))
        Jk1 = np.zeros((12, STATE_DOF))
        # alpha block
        Jk[0:3, 0:3] = -R_k.T
        Jk[0:3, 3:6] = hat(R_k.T @ u_p)
        Jk[0:3, 6:9] = -R_k.T * dt
        Jk[0:3, 15:18] = -0.5 * dt * dt * _I3
        Jk1[0:3, 0:3] = R_k.T
        # beta block
        Jk[3:6, 3:6] = hat(R_k.T @ u_v)
        Jk[3:6, 6:9] = -R_k.T
        Jk[3:6, 15:18] = -dt * _I3
        Jk1[3:6, 6:9] = R_k.T
        # orientation block
        Jk[6:9, 3:6] = -E_r @ R_k1.T @ R_k
        Jk1[6:9, 3:6] = E_r
        # external-force block
        Jk[9:12, 9:12] = -self.pre.J_fe_ba
        Jk1[9:12, 15:18] = _I3
        return r, {("s", self.prev_id): Jk, ("s", self.next_id): Jk1}, W


class ForceWalkFactor:
    """Weak random-walk regularizer between consecutive external forces."""

    def __init__(self, prev_id: int, next_id: int, sigma: float):
        self.prev_id = prev_id
        self.next_id = next_id
        self.weight_mat = np.eye(3) / max(sigma, 1e-12) ** 2

    def keys(self):
        return [("s", self.prev_id), ("s", self.next_id)]

    def linearize(self, get_state):
        sk = get_state(("s", self.prev_id))
        sk1 = get_state(("s", self.next_id))
        r = sk1.f_e - sk.f_e
        Jk = np.zeros((3, STATE_DOF))
        Jk1 = np.zeros((3, STATE_DOF))
        Jk[:, 15:18] = -_I3
        Jk1[:, 15:18] = _I3
        return r, {("s", self.prev_id): Jk, ("s", self.next_id): Jk1}, self.weight_mat


def projection_jacobians(p_w, q_wb, landmark, camera):
    """Reprojection residual pieces for one (pose, landmark) pair.

    Returns (pixel prediction, d_pix/d_pose (2, 6), d_pix/d_lm (2, 3),
    depth). The visual residual is z - prediction, so factor Jacobians
    are the negatives of these.
    """
    R_wb = quat_to_rot(q_wb)
    R_bc = camera.R_BC
    d_body = R_wb.T @ (landmark - p_w)
    pc = R_bc.T @ d_body
    X, Y, Z = pc
    pix = np.array([camera.fx * X / Z + camera.cx, camera.fy * Y / Z + camera.cy])
    d_pix_d_pc = np.array(
        [
            [camera.fx / Z, 0.0, -camera.fx * X / Z**2],
            [0.0, camera.fy / Z, -camera.fy * Y / Z**2],
        ]
    )
    d_pc_d_pose = np.zeros((3, 6))
    d_pc_d_pose[:, 0:3] = -R_bc.T @ R_wb.T
    d_pc_d_pose[:, 3:6] = R_bc.T @ hat(d_body)
    return pix, d_pix_d_pc @ d_pc_d_pose, d_pix_d_pc @ (R_bc.T @ R_wb.T), Z


class VisualFactor:
    """Huber-robustified reprojection factor for one observation."""

    def __init__(self, frame_key, lm_id, pixel, camera, sigma_px, huber_delta):
        self.frame_key = frame_key  # ("s", id) or ("kf", id)
        self.lm_id = lm_id
        self.pixel = np.asarray(pixel, dtype=float)
        self.camera = camera
        self.sigma_px = sigma_px
        self.huber_delta = huber_delta

    def keys(self):
        return [self.frame_key, ("lm", self.lm_id)]

    def linearize(self, get_state):
        pose = get_state(self.frame_key)
        lm = get_state(("lm", self.lm_id))
        if self.frame_key[0] == "s":
            p_w, q_wb = pose.p, pose.q
        else:
            p_w, q_wb = pose.p, pose.q  # Keyframe has the same attributes
        pix, J_pose, J_lm, depth = projection_jacobians(p_w, q_wb, lm, self.camera)
        r = self.pixel - pix
        # IRLS Huber: downweight observations past delta (in sigma units)
        norm = np.linalg.norm(r) / self.sigma_px
        scale = 1.0 if norm <= self.huber_delta else self.huber_delta / norm
        W = (scale / self.sigma_px**2) * np.eye(2)
        Jp = -J_pose
        if self.frame_key[0] == "s":
            Jfull = np.zeros((2, STATE_DOF))
            Jfull[:, 0:6] = Jp
            Jp = Jfull
        return r, {self.frame_key: Jp, ("lm", self.lm_id): -J_lm}, W


class PriorFactor:
    """Linearized Gaussian prior r(x) = r0 + sum J_i (x_i [-] x0_i)."""

    def __init__(self, keys, lin_points, jacobians, r0, boxminus):
        self._keys = list(keys)
        self.lin_points = lin_points  # key -> linearization value snapshot
        self.jacobians = jacobians  # key -> (dim_r, dof) block
        self.r0 = np.asarray(r0, dtype=float)
        self._boxminus = boxminus  # key -> callable(current, lin) -> tangent

    def keys(self):
        return list(self._keys)

    def residual(self, get_state):
        r = self.r0.copy()
        for key in self._keys:
            delta = self._boxminus[key](get_state(key), self.lin_points[key])
            r = r + self.jacobians[key] @ delta
        return r

    def linearize(self, get_state):
        return self.residual(get_state), dict(self.jacobians), np.eye(self.r0.size)
