"""Uniform B-splines over 3-vectors with matrix-form sampling.

A spline of order N is sampled on the segment starting at control point i
as value(u) = [c_i ... c_{i+N-1}] @ M_N @ [1, u, ..., u^{N-1}]^T with
u in [0, 1] the normalized segment time. Time derivatives of order d pick
up a factor 1/dt^d through the chain rule.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from math import comb, factorial

import numpy as np


class SplineSupportError(ValueError):
    """Raised when a sample time falls outside the valid support window."""


@lru_cache(maxsize=None)
def blending_matrix(order: int) -> np.ndarray:
    """Constant blending matrix M_N of the uniform B-spline of given order.

    Entry (s, n) is C(N-1, n)/(N-1)! * sum_{l=s}^{N-1} (-1)^(l-s) C(N, l-s)
    (N-1-l)^(N-1-n), the closed form of the uniform basis polynomials.
    """
    if not 2 <= order <= 8:
        raise ValueError(f"spline order must be in [2, 8], got {order}")
    n_ = order
    M = np.zeros((n_, n_))
    for s in range(n_):
        for n in range(n_):
            acc = 0.0
            for l in range(s, n_):
                base = float(n_ - 1 - l)
                power = n_ - 1 - n
                term = comb(n_, l - s) * (base ** power if power > 0 else 1.0)
                acc += term if (l - s) % 2 == 0 else -term
            M[s, n] = comb(n_ - 1, n) * acc / factorial(n_ - 1)
    M.setflags(write=False)
    return M


def _u_vector(u: float, order: int, derivative: int) -> np.ndarray:
    """Vector of d-th derivatives of [1, u, ..., u^{N-1}] w.r.t. u."""
    vec = np.zeros(order)
    for j in range(derivative, order):
        coeff = 1.0
        for r in range(derivative):
            coeff *= j - r
        vec[j] = coeff * u ** (j - derivative)
    return vec


def de_boor(control_points: np.ndarray, order: int, u: float) -> np.ndarray:
    """De Boor evaluation of one uniform spline segment at u in [0, 1].

    Oracle counterpart of the matrix-form sampling; `control_points` holds
    exactly `order` rows.
    """
    k = order
    # uniform knots: the segment lives on [0, 1] of knot index k-1
    d = [np.asarray(p, dtype=float) for p in control_points]
    x = u + k - 1
    for r in range(1, k):
        for j in range(k - 1, r - 1, -1):
            # knot of control point j is j - (k - 1) shifted to this segment
            left = j
            right = j + k - r
            alpha = (x - left) / (right - left)
            d[j] = (1.0 - alpha) * d[j - 1] + alpha * d[j]
    return d[k - 1]


@dataclass(frozen=True)
class UniformBSpline:
    """Order-N uniform B-spline over 3-vectors.

    Immutable; `extend` returns a new instance with the support window slid
    forward while keeping the total number of control points fixed.
    """

    order: int
    dt: float
    t0: float
    control_points: np.ndarray
    matrix: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.dt <= 0.0:
            raise ValueError("knot spacing must be positive")
        pts = np.atleast_2d(np.asarray(self.control_points, dtype=float))
        if pts.shape[0] < self.order:
            raise ValueError(
                f"need at least {self.order} control points, got {pts.shape[0]}"
            )
        object.__setattr__(self, "control_points", pts)
        object.__setattr__(self, "matrix", blending_matrix(self.order))

    @property
    def num_control_points(self) -> int:
        return self.control_points.shape[0]

    @property
    def t_start(self) -> float:
        return self.t0

    @property
    def t_end(self) -> float:
        """Last valid sample time (control point K - N + 1)."""
        return self.t0 + (self.num_control_points - self.order + 1) * self.dt

    def control_point_time(self, i: int) -> float:
        return self.t0 + i * self.dt

    def segment_index(self, t: float) -> tuple[int, float]:
        """Index of the leftmost active control point and normalized time u."""
        tol = 1e-9 * max(1.0, abs(t))
        if t < self.t0 - tol or t > self.t_end + tol:
            raise SplineSupportError(
                f"t={t} outside spline support [{self.t0}, {self.t_end}]"
            )
        s = (t - self.t0) / self.dt
        i = int(np.floor(s))
        i = min(max(i, 0), self.num_control_points - self.order)
        u = s - i
        # clamp round-off at the boundaries
        u = min(max(u, 0.0), 1.0 + 1e-12) if i == self.num_control_points - self.order else u
        return i, u

    def sample(self, t: float, derivative: int = 0) -> np.ndarray:
        """Spline value (derivative 0) or analytic time derivative at t."""
        if derivative < 0 or derivative >= self.order:
            raise ValueError(
                f"derivative order must be in [0, {self.order - 1}], got {derivative}"
            )
        i, w = self.sample_weights(t, derivative)
        return self.control_points[i : i + self.order].T @ w

    def sample_weights(self, t: float, derivative: int = 0) -> tuple[int, np.ndarray]:
        """Active segment index and per-control-point scalar weights at t.

        sample(t, d) == weights @ control_points[i:i+N]; used for analytic
        Jacobians of least-squares fits.
        """
        i, u = self.segment_index(t)
        uvec = _u_vector(u, self.order, derivative)
        w = self.matrix @ uvec
        # basis weights sum to exactly 1 (value) or 0 (derivatives); project
        # out the round-off so constant signals reproduce to machine precision
        # even after the 1/dt^d amplification
        if derivative == 0:
            w = w / w.sum()
        else:
            w = w - w.sum() / self.order
        return i, w / self.dt ** derivative

    def extend(
        self, new_end_time: float, init_times: np.ndarray, init_values: np.ndarray
    ) -> "UniformBSpline":
        """Slide the support window forward to cover new_end_time.

        Appends control points at the knot spacing until the valid support
        reaches new_end_time and removes the same number of oldest points.
        New points are initialized by linear interpolation of the given
        time-stamped signal, which must cover the appended knot times.
        """
        if new_end_time <= self.t_end:
            raise ValueError("new_end_time must exceed the current support end")
        n_new = int(np.ceil((new_end_time - self.t_end) / self.dt - 1e-9))
        init_times = np.asarray(init_times, dtype=float)
        init_values = np.atleast_2d(np.asarray(init_values, dtype=float))
        last_t = self.control_point_time(self.num_control_points - 1)
        new_times = last_t + self.dt * np.arange(1, n_new + 1)
        tol = 1e-9
        if init_times.size < 2 or init_times[0] > new_times[0] + self.dt + tol or init_times[-1] < new_times[-1] - tol:
            raise ValueError("init signal does not cover the appended span")
        # a gap is only a problem inside the new valid support; trailing
        # control points past new_end_time may be seeded from a held sample
        gaps = np.diff(init_times)
        if np.any(gaps > 2.0 * self.dt + tol) and np.any(
            (init_times[:-1][gaps > 2.0 * self.dt + tol] < new_end_time - tol)
        ):
            raise ValueError("gap in init signal over the appended span")
        new_pts = np.stack(
            [
                np.interp(new_times, init_times, init_values[:, k])
                for k in range(init_values.shape[1])
            ],
            axis=1,
        )
        pts = np.vstack([self.control_points[n_new:], new_pts])
        return UniformBSpline(
            order=self.order,
            dt=self.dt,
            t0=self.t0 + n_new * self.dt,
            control_points=pts,
        )

    def with_control_points(self, pts: np.ndarray) -> "UniformBSpline":
        return UniformBSpline(self.order, self.dt, self.t0, pts)


def interpolating_control_points(
    order: int,
    dt: float,
    t0: float,
    num_points: int,
    times: np.ndarray,
    values: np.ndarray,
) -> UniformBSpline:
    """Spline whose control points linearly interpolate a sampled signal.

    Initialization helper mirroring the gyro-based seeding of the sliding
    fit; the represented curve lags the signal by (N-1)/2 knots until a
    least-squares refit moves the control points.
    """
    knot_times = t0 + dt * np.arange(num_points)
    values = np.atleast_2d(np.asarray(values, dtype=float))
    pts = np.stack(
        [np.interp(knot_times, times, values[:, k]) for k in range(values.shape[1])],
        axis=1,
    )
    return UniformBSpline(order=order, dt=dt, t0=t0, control_points=pts)


def fit_least_squares(
    order: int,
    dt: float,
    t0: float,
    num_points: int,
    times: np.ndarray,
    values: np.ndarray,
    curvature_damping: float = 1e-8,
) -> UniformBSpline:
    """Control points minimizing the squared sampling error on a signal.

    Solves the linear least-squares problem over all samples whose time lies
    in the spline support. When samples are no denser than the knots the
    value-only problem is underdetermined; a small second-difference penalty
    on the control points pins the null space without visibly biasing
    smooth signals.
    """
    times = np.asarray(times, dtype=float)
    values = np.atleast_2d(np.asarray(values, dtype=float))
    spline = UniformBSpline(order, dt, t0, np.zeros((num_points, values.shape[1])))
    mask = (times >= spline.t_start) & (times <= spline.t_end)
    A = np.zeros((int(mask.sum()), num_points))
    for row, t in enumerate(times[mask]):
        i, w = spline.sample_weights(t, 0)
        A[row, i : i + order] = w
    D = np.zeros((max(num_points - 2, 0), num_points))
    for r in range(D.shape[0]):
        D[r, r : r + 3] = [1.0, -2.0, 1.0]
    H = A.T @ A + curvature_damping * (D.T @ D) + 1e-12 * np.eye(num_points)
    pts = np.linalg.solve(H, A.T @ values[mask])
    return spline.with_control_points(pts)
