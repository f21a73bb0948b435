import numpy as np
import pytest

from vidyn.bspline import (
    SplineSupportError,
    UniformBSpline,
    blending_matrix,
    de_boor,
    fit_least_squares,
)

RNG = np.random.default_rng(11)


def test_blending_matrix_order2_is_linear_interp():
    np.testing.assert_allclose(blending_matrix(2), [[1.0, -1.0], [0.0, 1.0]], atol=1e-15)


def test_blending_matrix_order3():
    expected = 0.5 * np.array([[1.0, -2.0, 1.0], [1.0, 2.0, -2.0], [0.0, 0.0, 1.0]])
    np.testing.assert_allclose(blending_matrix(3), expected, atol=1e-15)


@pytest.mark.parametrize("order", range(2, 9))
def test_matrix_form_matches_de_boor(order):
    for _ in range(50):
        pts = RNG.standard_normal((order, 3))
        u = RNG.uniform(0.0, 1.0)
        uvec = u ** np.arange(order)
        matrix_val = pts.T @ blending_matrix(order) @ uvec
        oracle_val = de_boor(pts, order, u)
        np.testing.assert_allclose(matrix_val, oracle_val, atol=1e-10)


@pytest.mark.parametrize("order", range(2, 9))
def test_partition_of_unity(order):
    c = RNG.standard_normal(3)
    dt = 0.1
    spline = UniformBSpline(order, dt, 0.0, np.tile(c, (order + 5, 1)))
    for t in np.linspace(spline.t_start, spline.t_end, 23):
        np.testing.assert_allclose(spline.sample(t, 0), c, atol=1e-12)
        for d in range(1, order):
            # normalize away the 1/dt^d amplification of exact-zero roundoff
            assert np.max(np.abs(spline.sample(t, d))) * dt ** d < 1e-12


def test_derivative_matches_finite_difference():
    h = 1e-5
    for _ in range(100):
        order = int(RNG.integers(2, 9))
        n_pts = order + int(RNG.integers(0, 6))
        spline = UniformBSpline(order, 0.05, 0.0, RNG.standard_normal((n_pts, 3)))
        t = RNG.uniform(spline.t_start + h, spline.t_end - h)
        fd = (spline.sample(t + h, 0) - spline.sample(t - h, 0)) / (2 * h)
        an = spline.sample(t, 1)
        scale = max(1.0, np.linalg.norm(an))
        assert np.linalg.norm(an - fd) / scale < 1e-6


def test_sin_fit_tracks_analytic_function():
    # fit control points by interpolating sin samples at 100 Hz, order 5
    dt = 0.01
    times = np.arange(0.0, 1.0, 1.0 / 100.0)
    values = np.stack([np.sin(times), np.zeros_like(times), np.zeros_like(times)], axis=1)
    spline = fit_least_squares(5, dt, 0.0, 90, times, values)
    t = 0.45
    assert abs(spline.sample(t, 0)[0] - np.sin(t)) < 1e-4
    assert abs(spline.sample(t, 1)[0] - np.cos(t)) < 1e-3


def test_out_of_support_raises():
    spline = UniformBSpline(4, 0.1, 0.0, RNG.standard_normal((8, 3)))
    with pytest.raises(SplineSupportError):
        spline.sample(spline.t_end + 0.05)
    with pytest.raises(SplineSupportError):
        spline.sample(-0.05)
    with pytest.raises(ValueError):
        spline.sample(0.1, derivative=4)


def test_order_out_of_range():
    with pytest.raises(ValueError):
        blending_matrix(1)
    with pytest.raises(ValueError):
        blending_matrix(9)


def test_extend_by_one_knot():
    spline = UniformBSpline(3, 0.1, 0.0, RNG.standard_normal((10, 3)))
    t_sig = np.arange(0.0, 3.0, 0.01)
    sig = np.tile([1.0, 2.0, 3.0], (t_sig.size, 1))
    out = spline.extend(spline.t_end + 0.1, t_sig, sig)
    assert out.num_control_points == spline.num_control_points
    assert out.t0 == pytest.approx(spline.t0 + 0.1)
    np.testing.assert_allclose(out.control_points[-1], [1.0, 2.0, 3.0], atol=1e-12)
    np.testing.assert_allclose(out.control_points[:-1], spline.control_points[1:], atol=1e-15)


def test_extend_initializes_from_interpolated_signal():
    # appended control points must equal the linear interpolation of the
    # provided signal at the knot times
    spline = UniformBSpline(4, 0.05, 0.0, np.zeros((8, 3)))
    t_sig = np.arange(0.0, 2.0, 0.005)
    sig = np.stack([np.sin(3 * t_sig), np.cos(2 * t_sig), 0.5 * t_sig], axis=1)
    out = spline.extend(spline.t_end + 0.15, t_sig, sig)
    n_new = 3
    new_times = [spline.control_point_time(7) + 0.05 * (i + 1) for i in range(n_new)]
    for k, tk in enumerate(new_times):
        expected = np.array([np.interp(tk, t_sig, sig[:, j]) for j in range(3)])
        np.testing.assert_allclose(out.control_points[-n_new + k], expected, atol=1e-12)


def test_extend_signal_gap_raises():
    spline = UniformBSpline(3, 0.1, 0.0, np.zeros((10, 3)))
    with pytest.raises(ValueError):
        spline.extend(spline.t_end + 0.3, np.array([0.0, 0.1]), np.zeros((2, 3)))
