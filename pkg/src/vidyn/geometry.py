"""Quaternion and rotation-group primitives.

Conventions used throughout the package:
  - Quaternions are Hamilton, stored w-first as numpy arrays [w, x, y, z].
  - Canonical form has w >= 0 (q and -q denote the same rotation).
  - R = quat_to_rot(q_WB) maps body vectors into the world: v_W = R @ v_B.
"""

from __future__ import annotations

import numpy as np

_EPS = 1e-12


def quat_identity() -> np.ndarray:
    return np.array([1.0, 0.0, 0.0, 0.0])


def quat_normalize(q: np.ndarray) -> np.ndarray:
    """Unit-norm, canonical-hemisphere (w >= 0) copy of q."""
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q)
    if n < _EPS:
        raise ValueError("cannot normalize near-zero quaternion")
    q = q / n
    if q[0] < 0.0:
        q = -q
    return q


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a ⊗ b, renormalized."""
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    q = np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )
    return quat_normalize(q)


def quat_multiply_raw(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product without normalization or hemisphere fixing.

    Needed where the sign of the product carries information (error
    quaternions) or where inputs are non-unit.
    """
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_to_rot(q: np.ndarray) -> np.ndarray:
    """3x3 rotation matrix of a unit quaternion."""
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def rot_to_quat(R: np.ndarray) -> np.ndarray:
    """Unit quaternion (canonical hemisphere) of a rotation matrix.

    Uses the Shepperd branch selection for numerical robustness.
    """
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    if tr > 0.0:
        s = np.sqrt(tr + 1.0) * 2.0
        q = np.array(
            [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
        )
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2.0
        q = np.array(
            [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
        )
    elif R[1, 1] > R[2, 2]:
        s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2.0
        q = np.array(
            [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
        )
    else:
        s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2.0
        q = np.array(
            [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
        )
    return quat_normalize(q)


def quat_from_axis_angle(phi: np.ndarray) -> np.ndarray:
    """Unit quaternion of a rotation vector (exponential map)."""
    phi = np.asarray(phi, dtype=float)
    angle = np.linalg.norm(phi)
    if angle < 1e-10:
        q = np.array([1.0, 0.5 * phi[0], 0.5 * phi[1], 0.5 * phi[2]])
        return quat_normalize(q)
    axis = phi / angle
    return quat_normalize(
        np.concatenate(([np.cos(0.5 * angle)], np.sin(0.5 * angle) * axis))
    )


def quat_to_axis_angle(q: np.ndarray) -> np.ndarray:
    """Rotation vector of a unit quaternion (logarithm map)."""
    q = quat_normalize(q)
    v = q[1:]
    sv = np.linalg.norm(v)
    if sv < 1e-10:
        return 2.0 * v
    angle = 2.0 * np.arctan2(sv, q[0])
    return angle * v / sv


def hat(v: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrix such that hat(a) @ b = a x b."""
    return np.array(
        [[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]]
    )


def so3_exp(phi: np.ndarray) -> np.ndarray:
    """Rodrigues exponential map from a rotation vector to SO(3)."""
    phi = np.asarray(phi, dtype=float)
    angle = np.linalg.norm(phi)
    K = hat(phi)
    if angle < 1e-8:
        # second-order Taylor, accurate to machine precision at small angles
        return np.eye(3) + K + 0.5 * (K @ K)
    a = np.sin(angle) / angle
    b = (1.0 - np.cos(angle)) / (angle * angle)
    return np.eye(3) + a * K + b * (K @ K)


def so3_log(R: np.ndarray) -> np.ndarray:
    """Rotation vector of a rotation matrix.

    Handles the pi-rotation branch where trace(R) approaches -1.
    """
    R = np.asarray(R, dtype=float)
    tr = np.clip((np.trace(R) - 1.0) * 0.5, -1.0, 1.0)
    angle = np.arccos(tr)
    if angle < 1e-8:
        w = 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
        return w
    if np.pi - angle < 1e-6:
        # near pi the antisymmetric part degenerates; recover axis from R + I
        A = R + np.eye(3)
        col = np.argmax(np.diag(A))
        axis = A[:, col] / np.linalg.norm(A[:, col])
        w = 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
        if np.dot(axis, w) < 0.0:
            axis = -axis
        return angle * axis
    return (
        angle
        / (2.0 * np.sin(angle))
        * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    )


def so3_left_jacobian(phi: np.ndarray) -> np.ndarray:
    """Left Jacobian of SO(3), J_l(phi)."""
    angle = np.linalg.norm(phi)
    K = hat(phi)
    if angle < 1e-8:
        return np.eye(3) + 0.5 * K + (K @ K) / 6.0
    a = (1.0 - np.cos(angle)) / (angle * angle)
    b = (angle - np.sin(angle)) / (angle ** 3)
    return np.eye(3) + a * K + b * (K @ K)


def so3_right_jacobian(phi: np.ndarray) -> np.ndarray:
    """Right Jacobian of SO(3), J_r(phi) = J_l(-phi)."""
    return so3_left_jacobian(-np.asarray(phi, dtype=float))


def rotation_angle(R: np.ndarray) -> float:
    """Geodesic rotation angle of R in radians."""
    return float(np.linalg.norm(so3_log(R)))


def check_rotation(R: np.ndarray, tol: float = 1e-9) -> bool:
    """True when R is orthonormal with determinant +1 within tol."""
    return (
        np.allclose(R @ R.T, np.eye(3), atol=tol)
        and abs(np.linalg.det(R) - 1.0) < tol
    )
