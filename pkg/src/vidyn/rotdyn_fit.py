"""Body-rate B-spline fitting to the quadrotor rotational dynamics.

The torque measurements (optionally corrected by a learned residual) are
fit by Levenberg-Marquardt to the Euler rotational dynamics

    tau = J * dw/dt + w x (J w)

with the body rate w(t) represented either directly by a uniform B-spline
over 3-vectors (velocity parameterization, analytic Jacobians) or by a
cumulative orientation B-spline over unit quaternions whose rates come
from finite differences (orientation parameterization, kept as a timing
baseline). A sliding fitter extends and refits the velocity spline each
camera frame and samples body rates at the command rate for the
preintegration stage.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .bspline import SplineSupportError, UniformBSpline, blending_matrix, _u_vector, fit_least_squares
from .geometry import (
    hat,
    quat_conjugate,
    quat_from_axis_angle,
    quat_multiply,
    quat_to_axis_angle,
)


@dataclass
class LMSettings:
    """Levenberg-Marquardt schedule: damped Gauss-Newton with multiplicative
    lambda updates, capped inner (damping) and outer iterations, and a
    step-norm termination threshold."""

    max_inner: int = 10
    max_outer: int = 100
    update_tol: float = 1e-6
    lambda_init: float = 1e-4
    lambda_factor: float = 10.0


@dataclass
class FitReport:
    iterations: int
    initial_cost: float
    final_cost: float
    time_ms: float
    converged: bool


@dataclass
class RotDynProblem:
    """One body-rate fitting problem over a fixed spline support."""

    spline: UniformBSpline
    torque_times: np.ndarray
    torques: np.ndarray  # rows already include any learned torque residual
    inertia: np.ndarray  # diagonal entries [kg m^2]
    settings: LMSettings = field(default_factory=LMSettings)

    def __post_init__(self):
        self.torque_times = np.asarray(self.torque_times, dtype=float)
        self.torques = np.atleast_2d(np.asarray(self.torques, dtype=float))
        self.inertia = np.asarray(self.inertia, dtype=float)
        tol = 1e-9
        if self.torque_times.size and (
            self.torque_times.min() < self.spline.t_start - tol
            or self.torque_times.max() > self.spline.t_end + tol
        ):
            raise SplineSupportError("torque timestamp outside spline support")


def residual_and_jacobian(
    problem: RotDynProblem, t_k: float
) -> tuple[np.ndarray, int, np.ndarray]:
    """Dynamics residual at one torque timestamp and its analytic Jacobian.

    Returns (residual, i, jac) where i is the leftmost active control
    point and jac has shape (3, 3*order): jac[:, 3n:3n+3] is the
    derivative w.r.t. control point i+n. The residual is
    J*dw + w x (J w) - tau with w, dw sampled from the spline.
    """
    sp = problem.spline
    Jd = problem.inertia
    i, w_val = sp.sample_weights(t_k, 0)
    _, w_der = sp.sample_weights(t_k, 1)
    pts = sp.control_points[i : i + sp.order]
    omega = pts.T @ w_val
    omega_dot = pts.T @ w_der
    k = int(np.searchsorted(problem.torque_times, t_k - 1e-12))
    tau = problem.torques[min(k, problem.torques.shape[0] - 1)]
    r = Jd * omega_dot + np.cross(omega, Jd * omega) - tau
    # d(w x Jw)/dw = [w]x J - [Jw]x
    cross_jac = hat(omega) @ np.diag(Jd) - hat(Jd * omega)
    jac = np.zeros((3, 3 * sp.order))
    for n in range(sp.order):
        jac[:, 3 * n : 3 * n + 3] = w_der[n] * np.diag(Jd) + w_val[n] * cross_jac
    return r, i, jac


def _design_matrices(sp: UniformBSpline, times: np.ndarray):
    """Dense (M, K) sampling matrices for values and first derivatives;
    the measurement times are fixed across LM iterations, so these are
    computed once per fit."""
    K = sp.num_control_points
    A_val = np.zeros((times.size, K))
    A_der = np.zeros((times.size, K))
    for row, t in enumerate(times):
        i, w = sp.sample_weights(t, 0)
        A_val[row, i : i + sp.order] = w
        i, w = sp.sample_weights(t, 1)
        A_der[row, i : i + sp.order] = w
    return A_val, A_der


def _velocity_residuals(A_val, A_der, pts, torques, Jd):
    omega = A_val @ pts
    omega_dot = A_der @ pts
    return omega, omega_dot * Jd + np.cross(omega, omega * Jd) - torques


def fit_velocity_spline(problem: RotDynProblem) -> tuple[UniformBSpline, FitReport]:
    """LM fit of the body-rate spline control points to the torque model."""
    t_start = time.perf_counter()
    s = problem.settings
    sp = problem.spline
    Jd = problem.inertia
    K = sp.num_control_points
    pts = sp.control_points.copy()
    A_val, A_der = _design_matrices(sp, problem.torque_times)
    Jdiag = np.diag(Jd)

    _, res = _velocity_residuals(A_val, A_der, pts, problem.torques, Jd)
    cost = float(np.sum(res * res))
    initial_cost = cost
    lam = s.lambda_init
    converged = False
    outer = 0

    for outer in range(1, s.max_outer + 1):
        omega, res = _velocity_residuals(A_val, A_der, pts, problem.torques, Jd)
        # stacked Jacobian: rows (m, 3), columns (K, 3);
        # d r_m / d c_n = A_der[m,n] J + A_val[m,n] ([w]x J - [Jw]x)
        M = problem.torque_times.size
        cross_jac = np.einsum("mij,jk->mik", _hat_rows(omega), Jdiag) - _hat_rows(
            omega * Jd
        )
        Jfull = (
            A_der[:, :, None, None] * Jdiag[None, None]
            + A_val[:, :, None, None] * cross_jac[:, None]
        )  # (M, K, 3, 3): d r_m / d c_n
        Jmat = Jfull.transpose(0, 2, 1, 3).reshape(3 * M, 3 * K)
        g = Jmat.T @ res.reshape(-1)
        H = Jmat.T @ Jmat

        accepted = False
        step_norm = np.inf
        for _ in range(s.max_inner):
            try:
                delta = np.linalg.solve(H + lam * np.eye(3 * K), -g)
            except np.linalg.LinAlgError:
                lam *= s.lambda_factor
                continue
            cand = pts + delta.reshape(K, 3)
            _, cand_res = _velocity_residuals(A_val, A_der, cand, problem.torques, Jd)
            cand_cost = float(np.sum(cand_res * cand_res))
            if cand_cost <= cost:
                pts, cost = cand, cand_cost
                lam = max(lam / s.lambda_factor, 1e-12)
                step_norm = float(np.linalg.norm(delta))
                accepted = True
                break
            lam *= s.lambda_factor
        if not accepted:
            break
        if step_norm < s.update_tol:
            converged = True
            break

    elapsed = (time.perf_counter() - t_start) * 1e3
    return sp.with_control_points(pts), FitReport(
        iterations=outer,
        initial_cost=initial_cost,
        final_cost=cost,
        time_ms=elapsed,
        converged=converged,
    )


def _hat_rows(v: np.ndarray) -> np.ndarray:
    """(M, 3, 3) stack of skew matrices for (M, 3) input rows."""
    out = np.zeros((v.shape[0], 3, 3))
    out[:, 0, 1] = -v[:, 2]
    out[:, 0, 2] = v[:, 1]
    out[:, 1, 0] = v[:, 2]
    out[:, 1, 2] = -v[:, 0]
    out[:, 2, 0] = -v[:, 1]
    out[:, 2, 1] = v[:, 0]
    return out


# ---------------------------------------------------------------------------
# Orientation-parameterized baseline: cumulative unit-quaternion B-spline.


class OrientationBSpline:
    """Cumulative-form uniform B-spline over unit quaternions.

    q(u) = q_i * prod_{j=1..N-1} Exp(Btilde_j(u) * Log(q_{i+j-1}^-1 q_{i+j}))
    where Btilde are the cumulative blending weights. Body rates and their
    derivatives are obtained by finite differencing the sampled orientation,
    which is what makes this parameterization slow to optimize.
    """

    def __init__(self, order: int, dt: float, t0: float, quats: np.ndarray):
        self.order = order
        self.dt = dt
        self.t0 = t0
        self.quats = np.atleast_2d(np.asarray(quats, dtype=float))
        if self.quats.shape[0] < order:
            raise ValueError(f"need at least {order} control rotations")
        self._M = blending_matrix(order)

    @property
    def num_control_points(self) -> int:
        return self.quats.shape[0]

    @property
    def t_end(self) -> float:
        return self.t0 + (self.num_control_points - self.order + 1) * self.dt

    def _segment(self, t: float) -> tuple[int, float]:
        tol = 1e-9 * max(1.0, abs(t))
        if t < self.t0 - tol or t > self.t_end + tol:
            raise SplineSupportError(
                f"t={t} outside spline support [{self.t0}, {self.t_end}]"
            )
        sidx = (t - self.t0) / self.dt
        i = int(np.floor(sidx))
        i = min(max(i, 0), self.num_control_points - self.order)
        return i, sidx - i

    def sample_quat(self, t: float) -> np.ndarray:
        i, u = self._segment(t)
        w = self._M @ _u_vector(u, self.order, 0)
        # cumulative weights: Btilde_j = sum_{s >= j} w_s
        btilde = np.cumsum(w[::-1])[::-1]
        q = self.quats[i]
        for j in range(1, self.order):
            d = quat_to_axis_angle(
                quat_multiply(quat_conjugate(self.quats[i + j - 1]), self.quats[i + j])
            )
            q = quat_multiply(q, quat_from_axis_angle(btilde[j] * d))
        return q

    def body_rate_and_derivative(self, t: float, h: float = 1e-4):
        """(w, dw/dt) at t from forward finite differences of orientation."""
        t = min(t, self.t_end - 2 * h)
        q0 = self.sample_quat(t)
        q1 = self.sample_quat(t + h)
        q2 = self.sample_quat(t + 2 * h)
        w0 = quat_to_axis_angle(quat_multiply(quat_conjugate(q0), q1)) / h
        w1 = quat_to_axis_angle(quat_multiply(quat_conjugate(q1), q2)) / h
        return w0, (w1 - w0) / h

    def with_quats(self, quats: np.ndarray) -> "OrientationBSpline":
        return OrientationBSpline(self.order, self.dt, self.t0, quats)


def integrate_gyro_quats(
    times: np.ndarray, gyro: np.ndarray, knot_times: np.ndarray
) -> np.ndarray:
    """Unit quaternions at the knot times from zero-order-hold gyro
    integration on a fine uniform grid starting at identity."""
    times = np.asarray(times, dtype=float)
    gyro = np.atleast_2d(np.asarray(gyro, dtype=float))
    knot_times = np.asarray(knot_times, dtype=float)
    step = 1e-3
    grid = np.arange(knot_times[0], knot_times[-1] + step, step)
    q = np.array([1.0, 0.0, 0.0, 0.0])
    qs = np.empty((grid.size, 4))
    for k, t in enumerate(grid):
        qs[k] = q
        idx = int(np.clip(np.searchsorted(times, t, side="right") - 1, 0, gyro.shape[0] - 1))
        q = quat_multiply(q, quat_from_axis_angle(gyro[idx] * step))
    out = np.empty((knot_times.size, 4))
    for j, tk in enumerate(knot_times):
        out[j] = qs[int(np.clip(round((tk - knot_times[0]) / step), 0, grid.size - 1))]
    return out


def _orientation_cost(
    sp: OrientationBSpline, times: np.ndarray, torques: np.ndarray, Jd: np.ndarray
) -> float:
    c = 0.0
    for t, tau in zip(times, torques):
        w, dw = sp.body_rate_and_derivative(t)
        r = Jd * dw + np.cross(w, Jd * w) - tau
        c += r @ r
    return c


def fit_orientation_spline(
    torque_times: np.ndarray,
    torques: np.ndarray,
    inertia: np.ndarray,
    init: OrientationBSpline,
    settings: LMSettings | None = None,
) -> tuple[OrientationBSpline, FitReport]:
    """LM fit of the orientation-parameterized spline to the torque model.

    Control rotations are updated on-manifold (right-multiplied rotation
    vectors); Jacobians come from central finite differences, computed per
    control point over the measurements in its support.
    """
    t_start = time.perf_counter()
    s = settings or LMSettings()
    torque_times = np.asarray(torque_times, dtype=float)
    torques = np.atleast_2d(np.asarray(torques, dtype=float))
    Jd = np.asarray(inertia, dtype=float)
    sp = init
    K = sp.num_control_points
    N = sp.order
    cost = _orientation_cost(sp, torque_times, torques, Jd)
    initial_cost = cost
    lam = s.lambda_init
    converged = False
    outer = 0
    eps = 1e-6

    # measurement -> affected control-point range [i, i+N] (finite
    # differencing in t can reach one segment past the active one)
    seg = np.array([sp._segment(min(t, sp.t_end - 3e-4))[0] for t in torque_times])

    def residual(spl, t, tau):
        w, dw = spl.body_rate_and_derivative(t)
        return Jd * dw + np.cross(w, Jd * w) - tau

    for outer in range(1, s.max_outer + 1):
        res = np.array([residual(sp, t, tau) for t, tau in zip(torque_times, torques)])
        H = np.zeros((3 * K, 3 * K))
        g = np.zeros(3 * K)
        cols = {}
        for m in range(K):
            affected = np.nonzero((seg <= m) & (m <= seg + N))[0]
            if affected.size == 0:
                continue
            Jcol = np.zeros((affected.size, 3, 3))
            for a in range(3):
                dvec = np.zeros(3)
                dvec[a] = eps
                qp = sp.quats.copy()
                qp[m] = quat_multiply(qp[m], quat_from_axis_angle(dvec))
                sp_p = sp.with_quats(qp)
                qm = sp.quats.copy()
                qm[m] = quat_multiply(qm[m], quat_from_axis_angle(-dvec))
                sp_m = sp.with_quats(qm)
                for row, idx in enumerate(affected):
                    rp = residual(sp_p, torque_times[idx], torques[idx])
                    rm = residual(sp_m, torque_times[idx], torques[idx])
                    Jcol[row, :, a] = (rp - rm) / (2 * eps)
            cols[m] = (affected, Jcol)
        for m, (affected, Jcol) in cols.items():
            for row, idx in enumerate(affected):
                Jrow = Jcol[row]
                g[3 * m : 3 * m + 3] += Jrow.T @ res[idx]
        for m, (aff_m, Jm) in cols.items():
            for n, (aff_n, Jn) in cols.items():
                common, im, in_ = np.intersect1d(aff_m, aff_n, return_indices=True)
                if common.size == 0:
                    continue
                block = np.zeros((3, 3))
                for cm, cn in zip(im, in_):
                    block += Jm[cm].T @ Jn[cn]
                H[3 * m : 3 * m + 3, 3 * n : 3 * n + 3] += block

        accepted = False
        step_norm = np.inf
        for _ in range(s.max_inner):
            try:
                delta = np.linalg.solve(H + lam * np.eye(3 * K), -g)
            except np.linalg.LinAlgError:
                lam *= s.lambda_factor
                continue
            qc = sp.quats.copy()
            for m in range(K):
                qc[m] = quat_multiply(qc[m], quat_from_axis_angle(delta[3 * m : 3 * m + 3]))
            cand = sp.with_quats(qc)
            cand_cost = _orientation_cost(cand, torque_times, torques, Jd)
            if cand_cost <= cost:
                sp, cost = cand, cand_cost
                lam = max(lam / s.lambda_factor, 1e-12)
                step_norm = float(np.linalg.norm(delta))
                accepted = True
                break
            lam *= s.lambda_factor
        if not accepted:
            break
        if step_norm < s.update_tol:
            converged = True
            break

    elapsed = (time.perf_counter() - t_start) * 1e3
    return sp, FitReport(
        iterations=outer,
        initial_cost=initial_cost,
        final_cost=cost,
        time_ms=elapsed,
        converged=converged,
    )


# ---------------------------------------------------------------------------
# Sliding window fitter driving the estimator pipeline.


class BufferGapError(ValueError):
    """Raised when the torque/gyro buffers do not cover the needed span."""


class SlidingRotationFitter:
    """Persistent body-rate spline slid and refit once per camera frame.

    Keeps a fixed-length support window ending at the latest frame time;
    each step appends control points (initialized from the gyro), refits
    against the torque model, and returns body rates sampled at the
    command rate over the new inter-frame span.
    """

    def __init__(
        self,
        inertia: np.ndarray,
        order: int = 5,
        dt: float = 0.01,
        window: float = 0.1,
        cmd_rate: float = 100.0,
        settings: LMSettings | None = None,
    ):
        self.inertia = np.asarray(inertia, dtype=float)
        self.order = order
        self.dt = dt
        self.window = window
        self.cmd_rate = cmd_rate
        self.settings = settings or LMSettings()
        self.spline: UniformBSpline | None = None
        self.last_frame_time: float | None = None
        self.last_report: FitReport | None = None

    def _check_cover(self, times: np.ndarray, lo: float, hi: float, what: str):
        times = np.asarray(times)
        if times.size == 0 or times[0] > lo + 1e-9 or times[-1] < hi - 1e-6:
            raise BufferGapError(f"{what} buffer does not cover [{lo:.3f}, {hi:.3f}]")
        inside = times[(times >= lo - 1e-9) & (times <= hi + 1e-9)]
        if inside.size >= 2 and np.max(np.diff(inside)) > 5 * self.dt:
            raise BufferGapError(f"gap in {what} buffer over [{lo:.3f}, {hi:.3f}]")

    def step(
        self,
        frame_time: float,
        torque_times: np.ndarray,
        torques: np.ndarray,
        gyro_times: np.ndarray,
        gyro: np.ndarray,
    ) -> tuple[np.ndarray, np.ndarray]:
        """Slide + refit, then sample body rates on the command-rate grid
        covering (previous frame, frame_time]."""
        gyro_times = np.asarray(gyro_times, dtype=float)
        gyro = np.atleast_2d(np.asarray(gyro, dtype=float))
        torque_times = np.asarray(torque_times, dtype=float)
        torques = np.atleast_2d(np.asarray(torques, dtype=float))

        t_lo = frame_time - self.window
        self._check_cover(gyro_times, t_lo, frame_time, "gyro")
        self._check_cover(torque_times, t_lo, frame_time, "torque")

        if self.spline is None:
            num = int(round(self.window / self.dt)) + self.order - 1
            self.spline = fit_least_squares(
                self.order, self.dt, t_lo, num, gyro_times, gyro
            )
            t_prev = t_lo
        else:
            if frame_time <= self.spline.t_end:
                raise ValueError("frame times must be strictly increasing")
            # hold the last gyro sample so the trailing control points
            # (which sit past the support end) can be initialized
            pad_t = self.spline.control_point_time(self.spline.num_control_points - 1)
            pad_t = max(pad_t, frame_time) + (self.order + 1) * self.dt
            gt = np.concatenate([gyro_times, [pad_t]])
            gv = np.vstack([gyro, gyro[-1]])
            self.spline = self.spline.extend(frame_time, gt, gv)
            t_prev = self.last_frame_time

        mask = (torque_times >= self.spline.t_start - 1e-12) & (
            torque_times <= self.spline.t_end + 1e-12
        )
        problem = RotDynProblem(
            self.spline, torque_times[mask], torques[mask], self.inertia, self.settings
        )
        self.spline, self.last_report = fit_velocity_spline(problem)
        self.last_frame_time = frame_time

        k0 = int(np.ceil(max(t_prev, self.spline.t_start) * self.cmd_rate - 1e-9))
        k1 = int(np.floor(frame_time * self.cmd_rate + 1e-9))
        times = np.arange(k0, k1 + 1) / self.cmd_rate
        rates = np.array([self.spline.sample(t) for t in times])
        return times, rates


def benchmark_parameterizations(
    orders=(5, 6, 7),
    spacings=(0.01, 0.02, 0.05),
    segment_length: float = 0.2,
    input_rate: float = 200.0,
    n_segments: int = 5,
    seed: int = 0,
    inertia=np.array([2.5e-3, 2.1e-3, 4.3e-3]),
) -> list[dict]:
    """Convergence-time comparison of the two spline parameterizations.

    Random smooth body-rate segments are converted to exact torques; both
    parameterizations are fit from gyro-based initializations and their
    wall-clock convergence times recorded. Returns one row per
    (order, spacing, parameterization).
    """
    rng = np.random.default_rng(seed)
    Jd = np.asarray(inertia, dtype=float)
    rows = []
    for order in orders:
        for dt in spacings:
            vel_ms, ori_ms, vel_it, ori_it = [], [], [], []
            for _ in range(n_segments):
                amp = rng.uniform(0.3, 1.0, size=3)
                freq = rng.uniform(1.0, 4.0, size=3)
                phase = rng.uniform(0, 2 * np.pi, size=3)

                def w_fn(t):
                    return amp * np.sin(freq * t + phase)

                def dw_fn(t):
                    return amp * freq * np.cos(freq * t + phase)

                n = int(round(segment_length * input_rate))
                times = np.arange(n) / input_rate
                w = np.array([w_fn(t) for t in times])
                tau = np.array(
                    [Jd * dw_fn(t) + np.cross(w_fn(t), Jd * w_fn(t)) for t in times]
                )
                num = int(np.ceil(segment_length / dt)) + order - 1
                init = fit_least_squares(order, dt, 0.0, num, times, w)
                prob = RotDynProblem(init, times, tau, Jd)
                _, rep_v = fit_velocity_spline(prob)
                knot_times = dt * np.arange(num)
                quats = integrate_gyro_quats(times, w, knot_times)
                init_o = OrientationBSpline(order, dt, 0.0, quats)
                _, rep_o = fit_orientation_spline(times, tau, Jd, init_o)
                vel_ms.append(rep_v.time_ms)
                ori_ms.append(rep_o.time_ms)
                vel_it.append(rep_v.iterations)
                ori_it.append(rep_o.iterations)
            for name, ms, its in (
                ("velocity", vel_ms, vel_it),
                ("orientation", ori_ms, ori_it),
            ):
                rows.append(
                    {
                        "order": order,
                        "dt": dt,
                        "segment_length": segment_length,
                        "input_rate": input_rate,
                        "parameterization": name,
                        "mean_ms": float(np.mean(ms)),
                        "std_ms": float(np.std(ms)),
                        "mean_iterations": float(np.mean(its)),
                    }
                )
    return rows
