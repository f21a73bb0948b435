import numpy as np
import pytest

from vidyn.geometry import (
    check_rotation,
    hat,
    quat_conjugate,
    quat_from_axis_angle,
    quat_identity,
    quat_multiply,
    quat_normalize,
    quat_to_axis_angle,
    quat_to_rot,
    rot_to_quat,
    rotation_angle,
    so3_exp,
    so3_left_jacobian,
    so3_log,
)

RNG = np.random.default_rng(7)


def random_quat(rng):
    q = rng.standard_normal(4)
    return quat_normalize(q)


def test_identity_product():
    q = random_quat(RNG)
    np.testing.assert_allclose(quat_multiply(quat_identity(), q), q, atol=1e-12)
    np.testing.assert_allclose(quat_multiply(q, quat_identity()), q, atol=1e-12)


def test_inverse_product():
    q = random_quat(RNG)
    np.testing.assert_allclose(
        quat_multiply(q, quat_conjugate(q)), quat_identity(), atol=1e-12
    )


def test_composition_matches_matrix_oracle():
    # 90 deg about z composed with 90 deg about x, checked against the
    # product of the corresponding rotation matrices
    qz = quat_from_axis_angle([0.0, 0.0, np.pi / 2])
    qx = quat_from_axis_angle([np.pi / 2, 0.0, 0.0])
    q = quat_multiply(qz, qx)
    R_expected = quat_to_rot(qz) @ quat_to_rot(qx)
    np.testing.assert_allclose(quat_to_rot(q), R_expected, atol=1e-12)
    np.testing.assert_allclose(q, rot_to_quat(R_expected), atol=1e-12)


def test_unit_norm_after_operations():
    for _ in range(100):
        a, b = random_quat(RNG), random_quat(RNG)
        q = quat_multiply(a, b)
        assert abs(np.linalg.norm(q) - 1.0) < 1e-9
        assert q[0] >= 0.0


def test_quat_rot_round_trip():
    for _ in range(100):
        q = random_quat(RNG)
        q2 = rot_to_quat(quat_to_rot(q))
        np.testing.assert_allclose(q2, q, atol=1e-9)


def test_exp_zero_is_identity():
    np.testing.assert_allclose(so3_exp(np.zeros(3)), np.eye(3), atol=1e-15)


def test_exp_quarter_turn_about_z():
    R = so3_exp([0.0, 0.0, np.pi / 2])
    expected = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    np.testing.assert_allclose(R, expected, atol=1e-12)


def test_log_exp_round_trip():
    v = np.array([0.1, -0.2, 0.3])
    np.testing.assert_allclose(so3_log(so3_exp(v)), v, atol=1e-12)
    for _ in range(200):
        angle = RNG.uniform(1e-6, np.pi - 1e-6)
        axis = RNG.standard_normal(3)
        axis /= np.linalg.norm(axis)
        v = angle * axis
        np.testing.assert_allclose(so3_log(so3_exp(v)), v, atol=1e-9)


def test_exp_matches_rodrigues_oracle():
    # independent Rodrigues evaluation
    for _ in range(50):
        v = RNG.standard_normal(3)
        angle = np.linalg.norm(v)
        k = v / angle
        K = hat(k)
        R_oracle = np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * (K @ K)
        np.testing.assert_allclose(so3_exp(v), R_oracle, atol=1e-12)


def test_log_near_pi_branch():
    for axis in (np.array([1.0, 0, 0]), np.array([0, 1.0, 0]), np.array([1.0, 1.0, 0]) / np.sqrt(2)):
        v = (np.pi - 1e-8) * axis
        R = so3_exp(v)
        v2 = so3_log(R)
        np.testing.assert_allclose(np.abs(v2 @ axis), np.pi - 1e-8, atol=1e-6)


def test_rotation_validity():
    for _ in range(20):
        R = so3_exp(RNG.standard_normal(3))
        assert check_rotation(R)
    assert rotation_angle(so3_exp([0, 0, 0.5])) == pytest.approx(0.5, abs=1e-12)


def test_quat_axis_angle_round_trip():
    for _ in range(100):
        v = RNG.standard_normal(3)
        if np.linalg.norm(v) > np.pi - 1e-3:
            v = v / np.linalg.norm(v) * (np.pi - 1e-3)
        np.testing.assert_allclose(quat_to_axis_angle(quat_from_axis_angle(v)), v, atol=1e-9)


def test_left_jacobian_finite_difference():
    # J_l maps rates of the rotation vector to body rates: numerically
    # compare Exp(phi + J_l^T ...) structure via the identity
    # Exp(phi + dphi) ~ Exp(J_l(phi) dphi) Exp(phi)
    phi = np.array([0.3, -0.4, 0.2])
    Jl = so3_left_jacobian(phi)
    for _ in range(10):
        d = RNG.standard_normal(3) * 1e-6
        lhs = so3_exp(phi + d)
        rhs = so3_exp(Jl @ d) @ so3_exp(phi)
        assert np.max(np.abs(lhs - rhs)) < 1e-11
