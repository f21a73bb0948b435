"""Per-frame estimation pipeline.

Every camera frame becomes a robot-state node: the body-rate spline is
slid and refit, the residual networks are evaluated on the preceding
100 ms command/gyro buffer, IMU and hybrid dynamics are preintegrated
over the inter-frame span, the window is extended, optimized, and slid.

Estimator modes reproduce the baseline grid:
  vio    visual-inertial only (no dynamics factors)
  vimo   dynamics factors with raw bias-corrected gyro rates, no networks
  hdvio  spline body rates + residual-thrust network
  hdvio2 spline body rates + residual-thrust and residual-torque networks
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from ..geometry import quat_multiply, quat_normalize, quat_to_rot
from ..preintegration import preintegrate_dynamics, preintegrate_imu
from ..rotdyn_fit import SlidingRotationFitter
from ..state import RobotState
from .factors import DynamicsFactor, ForceWalkFactor, ImuFactor, PriorFactor
from .problem import (
    FrameVisualBlock,
    LMSettings,
    marginalize,
    marginalize_frame_visual,
    optimize,
)
from .window import (
    Keyframe,
    SlidingWindow,
    StateNode,
    pose_boxminus,
    state_boxminus,
)

MODES = ("vio", "vimo", "hdvio", "hdvio2")


class TrackingStarvation(Warning):
    """Frame had fewer tracked features than the operating minimum."""


@dataclass
class EstimatorConfig:
    """Sliding-window estimator configuration."""

    mode: str = "hdvio2"
    max_keyframes: int = 10
    max_states: int = 5
    kf_translation: float = 0.2  # keyframe if moved farther than this [m]
    kf_min_features: int = 30  # keyframe if fewer features tracked
    min_features: int = 8  # below this, tracking starvation is reported
    huber_delta: float = 1.5  # robust-kernel knee [pixel sigmas]
    sigma_fe_walk: float = 0.5  # external-force random walk [N/kg per interval]
    imu_rate: float = 200.0
    cmd_rate: float = 100.0
    spline_order: int = 5
    spline_window: float = 0.1
    gravity: tuple = (0.0, 0.0, -9.81)
    lm_settings: LMSettings = field(default_factory=lambda: LMSettings(max_iterations=4))
    # initial prior sigmas on the first state (gauge fixing)
    init_sigma_pose: float = 1e-3
    init_sigma_vel: float = 0.1
    init_sigma_bias: float = 0.05
    init_sigma_force: float = 1.0
    # noise floors for factor weighting: discrete Euler preintegration has
    # truncation error even on noiseless input, so the measurement model
    # must never claim zero variance
    floor_accel: float = 5e-3
    floor_gyro: float = 2e-4
    floor_rate_spline: float = 3e-3  # spline body-rate approximation error
    floor_bias_accel: float = 1e-5
    floor_bias_gyro: float = 1e-6
    floor_thrust: float = 5e-3
    floor_torque: float = 2e-5
    floor_pixel: float = 0.25

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown estimator mode: {self.mode}")


@dataclass
class FrameResult:
    """Published estimate snapshot for one processed frame."""

    frame_id: int
    t: float
    state: RobotState
    is_keyframe: bool
    tracked: int
    starved: bool
    wall_time_s: float
    opt_cost: float = 0.0


def keyframe_policy(
    translation_since_kf: float,
    tracked_features: int,
    translation_threshold: float = 0.2,
    feature_threshold: int = 30,
) -> str:
    """Keyframe heuristic on estimated motion and track count."""
    if translation_since_kf > translation_threshold:
        return "keyframe"
    if tracked_features < feature_threshold:
        return "keyframe"
    return "regular"


def triangulate_midpoint(p0, q0, z0, p1, q1, z1, camera):
    """Midpoint triangulation from two pixel observations.

    Returns the world point minimizing the distance to both viewing
    rays, or None when the rays are near-parallel or the point falls
    behind either camera.
    """

    def ray(p, q, z):
        d_cam = np.array([(z[0] - camera.cx) / camera.fx, (z[1] - camera.cy) / camera.fy, 1.0])
        d = quat_to_rot(q) @ camera.R_BC @ d_cam
        return p, d / np.linalg.norm(d)

    c0, d0 = ray(p0, q0, z0)
    c1, d1 = ray(p1, q1, z1)
    b = d0 @ d1
    denom = 1.0 - b * b
    if denom < 1e-9:
        return None
    rhs = c1 - c0
    s = (rhs @ d0 - b * (rhs @ d1)) / denom
    u = (b * (rhs @ d0) - rhs @ d1) / denom
    if s <= camera.min_depth or u <= camera.min_depth:
        return None
    return 0.5 * (c0 + s * d0 + c1 + u * d1)


def _interp_rows(t_query, t_src, rows):
    return np.column_stack(
        [np.interp(t_query, t_src, rows[:, a]) for a in range(rows.shape[1])]
    )


def _half_step_rotate(vectors, rates, dt):
    """Rotate each row forward by its body rate over half a step.

    Sampling signals at step midpoints and rotating specific forces by
    Exp(omega dt/2) turns the Euler preintegration into a midpoint
    scheme, cutting its truncation error by an order of magnitude. The
    angles are tiny, so a second-order Rodrigues expansion suffices.
    """
    phi = 0.5 * dt * rates
    c1 = np.cross(phi, vectors)
    return vectors + c1 + 0.5 * np.cross(phi, c1)


class Pipeline:
    """Stateful frame-by-frame estimator."""

    def __init__(
        self,
        config: EstimatorConfig,
        camera,
        inertia,
        noise,
        sigma_pixel: float = 1.0,
        thrust_model=None,
        torque_model=None,
    ):
        self.config = config
        self.camera = camera
        self.inertia = np.asarray(inertia, dtype=float)
        self.noise = replace(
            noise,
            sigma_accel=max(noise.sigma_accel, config.floor_accel),
            sigma_gyro=max(noise.sigma_gyro, config.floor_gyro),
            sigma_bias_accel=max(noise.sigma_bias_accel, config.floor_bias_accel),
            sigma_bias_gyro=max(noise.sigma_bias_gyro, config.floor_bias_gyro),
            sigma_thrust=max(noise.sigma_thrust, config.floor_thrust),
            sigma_torque=max(noise.sigma_torque, config.floor_torque),
        )
        self.sigma_pixel = max(float(sigma_pixel), config.floor_pixel)
        # spline-sampled body rates carry a small approximation error on top
        # of the gyro noise; the dynamics factor must not claim otherwise
        self.noise_dyn = self.noise
        if config.mode in ("hdvio", "hdvio2"):
            self.noise_dyn = replace(
                self.noise,
                sigma_gyro=max(self.noise.sigma_gyro, config.floor_rate_spline),
            )
        self.thrust_model = thrust_model if config.mode in ("hdvio", "hdvio2") else None
        self.torque_model = torque_model if config.mode == "hdvio2" else None
        self.gravity = np.asarray(config.gravity, dtype=float)
        self.window = SlidingWindow(
            max_keyframes=config.max_keyframes, max_states=config.max_states
        )
        self.fitter = (
            SlidingRotationFitter(
                self.inertia,
                order=config.spline_order,
                dt=1.0 / config.cmd_rate,
                window=config.spline_window,
                cmd_rate=config.cmd_rate,
            )
            if config.mode in ("hdvio", "hdvio2")
            else None
        )
        self.frame_count = 0
        self.last_kf_p = None
        self.prev_ids: set = set()
        self.start_time = None
        # rolling sensor history (trimmed to the recent past)
        self._imu_t = np.zeros(0)
        self._imu_a = np.zeros((0, 3))
        self._imu_w = np.zeros((0, 3))
        self._cmd_t = np.zeros(0)
        self._cmd_f = np.zeros((0, 3))
        self._cmd_tau = np.zeros((0, 3))
        self._cmd_tau_res = np.zeros((0, 3))  # learned residual, per command sample
        self.results: list[FrameResult] = []

    # ---------------------------------------------------------------- buffers

    def _append_history(self, imu_t, imu_a, imu_w, cmd_t, thrust, torque):
        imu_t = np.atleast_1d(np.asarray(imu_t, dtype=float))
        cmd_t = np.atleast_1d(np.asarray(cmd_t, dtype=float))
        # spans are inclusive at both ends; drop already-stored samples
        fresh = imu_t > (self._imu_t[-1] + 1e-9 if self._imu_t.size else -np.inf)
        self._imu_t = np.concatenate([self._imu_t, imu_t[fresh]])
        self._imu_a = np.vstack([self._imu_a, np.atleast_2d(imu_a)[fresh]])
        self._imu_w = np.vstack([self._imu_w, np.atleast_2d(imu_w)[fresh]])
        fresh = cmd_t > (self._cmd_t[-1] + 1e-9 if self._cmd_t.size else -np.inf)
        self._cmd_t = np.concatenate([self._cmd_t, cmd_t[fresh]])
        self._cmd_f = np.vstack([self._cmd_f, np.atleast_2d(thrust)[fresh]])
        self._cmd_tau = np.vstack([self._cmd_tau, np.atleast_2d(torque)[fresh]])
        self._cmd_tau_res = np.vstack(
            [self._cmd_tau_res, np.zeros((int(fresh.sum()), 3))]
        )
        # trim everything older than one second before the newest sample
        if self._imu_t.size:
            keep = self._imu_t >= self._imu_t[-1] - 1.0
            self._imu_t, self._imu_a, self._imu_w = (
                self._imu_t[keep],
                self._imu_a[keep],
                self._imu_w[keep],
            )
        if self._cmd_t.size:
            keep = self._cmd_t >= self._cmd_t[-1] - 1.0
            self._cmd_t = self._cmd_t[keep]
            self._cmd_f = self._cmd_f[keep]
            self._cmd_tau = self._cmd_tau[keep]
            self._cmd_tau_res = self._cmd_tau_res[keep]

    def _net_buffer(self, t_end: float, b_g: np.ndarray):
        """(commands, gyro) pairs of the last 10 command samples <= t_end,
        or None while history is too short."""
        from ..learner.tcn import BUFFER_LEN

        idx = np.nonzero(self._cmd_t <= t_end + 1e-9)[0]
        if idx.size < BUFFER_LEN:
            return None
        idx = idx[-BUFFER_LEN:]
        times = self._cmd_t[idx]
        gyro = _interp_rows(times, self._imu_t, self._imu_w) - b_g
        return times, idx, gyro

    # ------------------------------------------------------------- span prep

    def _span_grid(self, t0: float, t1: float):
        span = t1 - t0
        n = max(1, int(round(span * self.config.imu_rate)))
        dt = span / n
        return t0 + np.arange(n) * dt, dt

    def _rates_on_grid(self, grid, b_g):
        """Body rates at the grid times: fitted spline when available,
        bias-corrected gyro otherwise."""
        if self.fitter is not None and self.fitter.spline is not None:
            sp = self.fitter.spline
            if grid[0] >= sp.t_start - 1e-9 and grid[-1] <= sp.t_end + 1e-9:
                return np.array([sp.sample(float(t)) for t in grid])
        return _interp_rows(grid, self._imu_t, self._imu_w) - b_g

    def _zoh_cmd(self, grid, rows):
        idx = np.searchsorted(self._cmd_t, grid + 1e-9) - 1
        idx = np.clip(idx, 0, self._cmd_t.size - 1)
        return rows[idx]

    def _interp_accel(self, tq):
        """Accelerometer values at the query times.

        The specific force is commanded thrust (a zero-order hold that
        steps at the command rate) plus smooth aerodynamic and bias
        terms. Interpolating the raw samples linearly smears the command
        steps and biases the preintegral; instead the known ZOH part is
        removed, only the smooth remainder interpolated, and the hold
        added back at the query times.
        """
        if self._cmd_t.size == 0:
            return _interp_rows(tq, self._imu_t, self._imu_a)
        smooth = self._imu_a - self._zoh_cmd(self._imu_t, self._cmd_f)
        return _interp_rows(tq, self._imu_t, smooth) + self._zoh_cmd(tq, self._cmd_f)

    # ------------------------------------------------------------ frame entry

    def initialize(self, t: float, init_state: RobotState, ids=None, pixels=None):
        """Seed the window with the first frame at a known state."""
        state = init_state.copy()
        state.t = t
        node = StateNode(frame_id=0, state=state, is_keyframe=True)
        if ids is not None:
            node.observations = {int(j): np.asarray(z, dtype=float) for j, z in zip(ids, pixels)}
            self.prev_ids = set(node.observations)
        self.window.states.append(node)
        self.window.prior = self._initial_prior(node)
        self.last_kf_p = state.p.copy()
        self.start_time = t
        self.frame_count = 1
        self.results.append(
            FrameResult(0, t, state.copy(), True, len(self.prev_ids), False, 0.0)
        )

    def _initial_prior(self, node: StateNode) -> PriorFactor:
        c = self.config
        sig = np.concatenate(
            [
                np.full(3, c.init_sigma_pose),
                np.full(3, c.init_sigma_pose),
                np.full(3, c.init_sigma_vel),
                np.full(3, c.init_sigma_bias),
                np.full(3, c.init_sigma_bias),
                np.full(3, c.init_sigma_force),
            ]
        )
        key = ("s", node.frame_id)
        J = np.diag(1.0 / sig)
        return PriorFactor(
            [key],
            {key: node.state.copy()},
            {key: J},
            np.zeros(18),
            {key: state_boxminus},
        )

    def process_frame(
        self,
        t: float,
        ids,
        pixels,
        imu_t,
        imu_a,
        imu_w,
        cmd_t,
        thrust,
        torque,
    ) -> FrameResult:
        """Advance the estimator by one camera frame.

        The sensor arguments hold the new samples since the previous
        call; they are appended to the rolling history internally.
        """
        wall0 = time.perf_counter()
        self._append_history(imu_t, imu_a, imu_w, cmd_t, thrust, torque)
        if not self.window.states and not self.window.keyframes:
            raise RuntimeError("pipeline not initialized; call initialize() first")

        prev = self.window.states[-1]
        t_prev = prev.state.t
        b_a, b_g = prev.state.b_a, prev.state.b_g

        # 1) residual networks on the buffer ending at the previous frame
        f_res = np.zeros(3)
        buf = self._net_buffer(t_prev, b_g)
        if buf is not None:
            times_b, idx_b, gyro_b = buf
            cmds_f = self._cmd_f[idx_b]
            cmds_tau = self._cmd_tau[idx_b]
            if self.thrust_model is not None:
                from ..learner.tcn import evaluate

                f_res = evaluate(self.thrust_model, cmds_f, gyro_b)
            if self.torque_model is not None:
                from ..learner.tcn import evaluate

                tau_res = evaluate(self.torque_model, cmds_tau, gyro_b)
                fresh = self._cmd_t > t_prev + 1e-9
                self._cmd_tau_res[fresh] = tau_res

        # 2) slide + refit the body-rate spline over the trailing window
        if self.fitter is not None and self.start_time is not None:
            if t - self.config.spline_window >= self.start_time - 1e-9:
                sel = self._cmd_t <= t + 1e-9
                tau_t = self._cmd_t[sel]
                tau_v = self._cmd_tau[sel] + self._cmd_tau_res[sel]
                gyro_t = self._imu_t
                gyro_v = self._imu_w - b_g
                # the sample grids lag the frame time by up to one period;
                # hold the last sample so the fit window is covered
                if tau_t[-1] < t - 1e-9:
                    tau_t = np.append(tau_t, t)
                    tau_v = np.vstack([tau_v, tau_v[-1]])
                if gyro_t[-1] < t - 1e-9:
                    gyro_t = np.append(gyro_t, t)
                    gyro_v = np.vstack([gyro_v, gyro_v[-1]])
                self.fitter.step(t, tau_t, tau_v, gyro_t, gyro_v)

        # 3) preintegrate IMU and dynamics over (t_prev, t]; signals are
        # resampled at step midpoints (midpoint rule via half-step rotation)
        grid, dtp = self._span_grid(t_prev, t)
        mid = grid + 0.5 * dtp
        gyro = _interp_rows(np.minimum(mid, self._imu_t[-1]), self._imu_t, self._imu_w)
        accel = self._interp_accel(np.minimum(mid, self._imu_t[-1]))
        accel = _half_step_rotate(accel, gyro, dtp)
        imu_pre = preintegrate_imu(accel, gyro, b_a, b_g, self.noise, dtp)
        dyn_pre = None
        if self.config.mode != "vio":
            rates = self._rates_on_grid(mid, b_g)
            thrust_grid = _half_step_rotate(
                self._zoh_cmd(grid, self._cmd_f), rates, dtp
            )
            dyn_pre = preintegrate_dynamics(
                thrust_grid, rates, accel, b_a, self.noise_dyn, dtp, f_res=f_res
            )

        # 4) predict and append the new state node
        state = self._predict(prev.state, imu_pre, t)
        node = StateNode(
            frame_id=self.frame_count,
            state=state,
            observations={int(j): np.asarray(z, dtype=float) for j, z in zip(ids, pixels)},
            imu_pre=imu_pre,
            dyn_pre=dyn_pre,
        )
        self.frame_count += 1

        tracked = len(set(node.observations) & self.prev_ids)
        self.prev_ids = set(node.observations)
        starved = tracked < self.config.min_features
        moved = float(np.linalg.norm(state.p - self.last_kf_p))
        node.is_keyframe = (
            keyframe_policy(
                moved, tracked, self.config.kf_translation, self.config.kf_min_features
            )
            == "keyframe"
        )
        if node.is_keyframe:
            self.last_kf_p = state.p.copy()
        self.window.states.append(node)

        # 5) landmark bookkeeping, optimization, sliding
        self._triangulate_new()
        report = optimize(self.window, self._factors(), self.config.lm_settings)
        self._slide()
        self.window.check_sizes()

        est = self.window.states[-1].state
        if node.is_keyframe:
            self.last_kf_p = est.p.copy()
        result = FrameResult(
            node.frame_id,
            t,
            est.copy(),
            node.is_keyframe,
            tracked,
            starved,
            time.perf_counter() - wall0,
            report.final_cost,
        )
        self.results.append(result)
        return result

    def _predict(self, prev: RobotState, pre, t: float) -> RobotState:
        dt = t - prev.t
        dp, dv, dq = pre.corrected(prev.b_a, prev.b_g)
        R = quat_to_rot(prev.q)
        out = prev.copy()
        out.t = t
        out.p = prev.p + prev.v * dt + 0.5 * self.gravity * dt * dt + R @ dp
        out.v = prev.v + self.gravity * dt + R @ dv
        out.q = quat_normalize(quat_multiply(prev.q, dq))
        return out

    # ------------------------------------------------------------- landmarks

    def _reproj_error(self, p, q, lm):
        R_wc = quat_to_rot(q) @ self.camera.R_BC
        pc = R_wc.T @ (lm - p)
        if pc[2] < self.camera.min_depth:
            return np.inf
        u = self.camera.fx * pc[0] / pc[2] + self.camera.cx
        v = self.camera.fy * pc[1] / pc[2] + self.camera.cy
        return u, v, pc[2]

    def _triangulate_new(self):
        """Seed landmarks for newest-frame features seen from >= 2 poses."""
        gate = max(3.0 * self.sigma_pixel, 2.0)
        newest = self.window.states[-1]
        candidates = {
            j for j in newest.observations if j not in self.window.landmarks
        }
        if not candidates:
            return
        cam = self.camera
        seen: dict[int, list] = {j: [] for j in candidates}
        for fr in self.window.frames():
            pose = fr.state if isinstance(fr, StateNode) else fr
            js = [j for j in fr.observations if j in candidates]
            if not js:
                continue
            R_wc = quat_to_rot(pose.q) @ cam.R_BC
            zs = np.array([fr.observations[j] for j in js])
            d_cam = np.column_stack(
                [
                    (zs[:, 0] - cam.cx) / cam.fx,
                    (zs[:, 1] - cam.cy) / cam.fy,
                    np.ones(len(js)),
                ]
            )
            dirs = d_cam @ R_wc.T
            dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
            for a, j in enumerate(js):
                seen[j].append((pose.p, dirs[a], zs[a], R_wc))
        # pick the widest-baseline partner for each newest-frame view, then
        # run the midpoint solves and acceptance gates on stacked arrays
        ids, v0s, v1s, baselines = [], [], [], []
        for j, views in seen.items():
            if len(views) < 2:
                continue
            p1 = views[-1][0]
            dists = np.linalg.norm(np.array([v[0] for v in views[:-1]]) - p1, axis=1)
            a = int(np.argmax(dists))
            ids.append(int(j))
            v0s.append(views[a])
            v1s.append(views[-1])
            baselines.append(float(dists[a]))
        if not ids:
            return
        C0 = np.array([v[0] for v in v0s])
        D0 = np.array([v[1] for v in v0s])
        Z0 = np.array([v[2] for v in v0s])
        RW0 = np.array([v[3] for v in v0s])
        C1 = np.array([v[0] for v in v1s])
        D1 = np.array([v[1] for v in v1s])
        Z1 = np.array([v[2] for v in v1s])
        RW1 = np.array([v[3] for v in v1s])
        baseline = np.asarray(baselines)

        b = np.sum(D0 * D1, axis=1)
        denom = 1.0 - b * b
        ok = denom >= 1e-9
        denom = np.where(ok, denom, 1.0)
        rhs = C1 - C0
        rd0 = np.sum(rhs * D0, axis=1)
        rd1 = np.sum(rhs * D1, axis=1)
        s = (rd0 - b * rd1) / denom
        u = (b * rd0 - rd1) / denom
        ok &= (s > cam.min_depth) & (u > cam.min_depth)
        pts = 0.5 * (C0 + s[:, None] * D0 + C1 + u[:, None] * D1)
        depth = np.linalg.norm(pts - C0, axis=1)
        # short baselines amplify pose error into depth error; wait for
        # more parallax instead of seeding a bad point
        ok &= (depth <= 50.0) & (baseline >= 0.02 * depth)
        for C, RW, Z in ((C0, RW0, Z0), (C1, RW1, Z1)):
            pc = np.matmul((pts - C)[:, None, :], RW)[:, 0, :]
            z_safe = np.where(pc[:, 2] > cam.min_depth, pc[:, 2], 1.0)
            du = cam.fx * pc[:, 0] / z_safe + cam.cx - Z[:, 0]
            dv = cam.fy * pc[:, 1] / z_safe + cam.cy - Z[:, 1]
            ok &= (pc[:, 2] > cam.min_depth) & (np.hypot(du, dv) <= gate)
        for a in np.flatnonzero(ok):
            self.window.landmarks[ids[a]] = pts[a]

    def _prune_landmarks(self):
        counts: dict[int, int] = {}
        for fr in self.window.frames():
            for j in fr.observations:
                if j in self.window.landmarks:
                    counts[j] = counts.get(j, 0) + 1
        for j in list(self.window.landmarks):
            if counts.get(j, 0) < 2:
                del self.window.landmarks[j]
        # drop gross outliers: points whose reprojection in the newest
        # frame diverged far beyond the pixel model (bad initialization)
        node = self.window.states[-1]
        gate = 50.0 * max(3.0 * self.sigma_pixel, 2.0)
        p, q = node.state.p, node.state.q
        ids = [j for j in node.observations if j in self.window.landmarks]
        if not ids:
            return
        lms = np.array([self.window.landmarks[j] for j in ids])
        zs = np.array([node.observations[j] for j in ids])
        cam = self.camera
        pc = (lms - p) @ (quat_to_rot(q) @ cam.R_BC)
        bad = pc[:, 2] < cam.min_depth
        with np.errstate(divide="ignore", invalid="ignore"):
            u = cam.fx * pc[:, 0] / pc[:, 2] + cam.cx
            v = cam.fy * pc[:, 1] / pc[:, 2] + cam.cy
            bad |= np.hypot(u - zs[:, 0], v - zs[:, 1]) > gate
        for j in np.asarray(ids)[bad]:
            del self.window.landmarks[int(j)]

    # --------------------------------------------------------------- factors

    def _factors(self) -> list:
        factors: list = []
        if self.window.prior is not None:
            factors.append(self.window.prior)
        states = self.window.states
        for a in range(1, len(states)):
            prev_id, next_id = states[a - 1].frame_id, states[a].frame_id
            node = states[a]
            if node.imu_pre is not None:
                factors.append(ImuFactor(prev_id, next_id, node.imu_pre, self.gravity))
            if node.dyn_pre is not None:
                factors.append(DynamicsFactor(prev_id, next_id, node.dyn_pre, self.gravity))
            factors.append(ForceWalkFactor(prev_id, next_id, self.config.sigma_fe_walk))
        for fr in self.window.frames():
            if isinstance(fr, StateNode):
                key = ("s", fr.frame_id)
            else:
                key = ("kf", fr.frame_id)
            lm_ids = [j for j in fr.observations if j in self.window.landmarks]
            if not lm_ids:
                continue
            factors.append(
                FrameVisualBlock(
                    key,
                    lm_ids,
                    np.array([fr.observations[j] for j in lm_ids]),
                    self.camera,
                    self.sigma_pixel,
                    self.config.huber_delta,
                )
            )
        return factors

    # --------------------------------------------------------------- sliding

    def _marginalization_values(self) -> dict:
        vals: dict = {}
        for node in self.window.states:
            vals[("s", node.frame_id)] = node.state
        for kf in self.window.keyframes:
            vals[("kf", kf.frame_id)] = kf
        return vals

    def _slide(self):
        cfg = self.config
        if len(self.window.states) > cfg.max_states:
            self._retire_oldest_state()
        if len(self.window.keyframes) > cfg.max_keyframes:
            self._retire_oldest_keyframe()
        self._prune_landmarks()

    def _retire_oldest_state(self):
        node = self.window.states[0]
        successor = self.window.states[1]
        key = ("s", node.frame_id)
        # the prior is linear, so folding it through the marginalization is
        # exact whether or not it touches the leaving state
        absorbed: list = []
        if self.window.prior is not None:
            absorbed.append(self.window.prior)
        if successor.imu_pre is not None:
            absorbed.append(
                ImuFactor(node.frame_id, successor.frame_id, successor.imu_pre, self.gravity)
            )
        if successor.dyn_pre is not None:
            absorbed.append(
                DynamicsFactor(node.frame_id, successor.frame_id, successor.dyn_pre, self.gravity)
            )
        absorbed.append(
            ForceWalkFactor(node.frame_id, successor.frame_id, self.config.sigma_fe_walk)
        )
        mask = np.ones(18, dtype=bool)
        if node.is_keyframe:
            mask[:6] = False  # keep the pose as a keyframe variable
        prior = marginalize(self._marginalization_values(), absorbed, {key: mask})
        self.window.states.pop(0)
        successor.imu_pre = None
        successor.dyn_pre = None
        if node.is_keyframe:
            kf = Keyframe(
                node.frame_id,
                node.state.t,
                node.state.p.copy(),
                node.state.q.copy(),
                dict(node.observations),
            )
            self.window.keyframes.append(kf)
            if prior is not None:
                _retarget_prior_to_pose(prior, key, kf)
        self.window.prior = prior

    def _retire_oldest_keyframe(self):
        kf = self.window.keyframes.pop(0)
        key = ("kf", kf.frame_id)
        # landmarks the leaving keyframe shares with retained keyframes are
        # Schur-marginalized into the prior together with the pose; its
        # other observations are dropped (landmarks seen only by
        # non-keyframes keep living on their remaining observations)
        retained_obs: set = set()
        for other in self.window.keyframes:
            retained_obs |= set(other.observations)
        for node in self.window.states:
            if node.is_keyframe:
                retained_obs |= set(node.observations)
        marg_lms = [
            j
            for j in kf.observations
            if j in self.window.landmarks and j in retained_obs
        ]
        vals = {**self._marginalization_values(), key: kf}
        for j in marg_lms:
            vals[("lm", j)] = self.window.landmarks[j]

        # each landmark is eliminated from its own observation rows, then
        # the pose from the stacked remainder plus the old prior
        marg_set = set(marg_lms)
        blocks = []
        for fr in [kf] + list(self.window.frames()):
            lm_ids = [j for j in fr.observations if j in marg_set]
            if not lm_ids:
                continue
            fkey = (
                ("s", fr.frame_id) if isinstance(fr, StateNode) else ("kf", fr.frame_id)
            )
            blocks.append(
                FrameVisualBlock(
                    fkey,
                    lm_ids,
                    np.array([fr.observations[j] for j in lm_ids]),
                    self.camera,
                    self.sigma_pixel,
                    self.config.huber_delta,
                )
            )
        for j in marg_lms:
            del self.window.landmarks[j]
        prior_touches = self.window.prior is not None and key in self.window.prior.keys()
        if not blocks and not prior_touches:
            return  # the leaving pose carries no information
        self.window.prior = marginalize_frame_visual(
            vals, self.window.prior, blocks, key
        )


def _retarget_prior_to_pose(prior: PriorFactor, old_key, kf: Keyframe):
    """Rename a demoted state's prior block to its keyframe pose key."""
    if old_key not in prior.jacobians:
        return
    J = prior.jacobians.pop(old_key)
    lin = prior.lin_points.pop(old_key)
    prior._boxminus.pop(old_key)
    new_key = ("kf", kf.frame_id)
    prior._keys[prior._keys.index(old_key)] = new_key
    prior.jacobians[new_key] = J[:, :6]
    prior.lin_points[new_key] = Keyframe(kf.frame_id, kf.t, lin.p.copy(), lin.q.copy(), {})
    prior._boxminus[new_key] = lambda cur, ref: pose_boxminus(cur.p, cur.q, ref.p, ref.q)


# ----------------------------------------------------------------- run driver


def run_pipeline(
    sim,
    config: EstimatorConfig,
    thrust_model=None,
    torque_model=None,
    init_state: RobotState | None = None,
) -> Pipeline:
    """Feed a simulated run through the estimator frame by frame.

    The first frame initializes the window from init_state (the truth
    state at that time by default, mirroring a mocap-aided takeoff).
    """
    ms = sim.measurements
    frames = ms.frames
    if not frames:
        raise ValueError("run has no camera frames")
    pipe = Pipeline(
        config,
        sim.camera,
        sim.quad.inertia,
        sim.noise,
        sigma_pixel=sim.noise.sigma_pixel,
        thrust_model=thrust_model,
        torque_model=torque_model,
    )
    t0 = frames[0].t
    if init_state is None:
        p0, q0, v0, _ = sim.truth.state_at(t0)
        init_state = RobotState(
            t=t0,
            p=p0,
            q=q0,
            v=v0,
            b_a=np.zeros(3),
            b_g=np.zeros(3),
            f_e=np.zeros(3),
        )
    # seed the history with everything up to the first frame
    sl = ms.imu_slice(-np.inf, t0)
    csel = ms.cmd_times <= t0 + 1e-9
    pipe._append_history(
        ms.imu_times[sl],
        ms.accel[sl],
        ms.gyro[sl],
        ms.cmd_times[csel],
        ms.thrust_meas[csel],
        ms.torque_meas[csel],
    )
    pipe.initialize(t0, init_state, frames[0].ids, frames[0].pixels)
    t_prev = t0
    for fr in frames[1:]:
        sl = ms.imu_slice(t_prev, fr.t)
        csel = (ms.cmd_times > t_prev + 1e-9) & (ms.cmd_times <= fr.t + 1e-9)
        pipe.process_frame(
            fr.t,
            fr.ids,
            fr.pixels,
            ms.imu_times[sl],
            ms.accel[sl],
            ms.gyro[sl],
            ms.cmd_times[csel],
            ms.thrust_meas[csel],
            ms.torque_meas[csel],
        )
        t_prev = fr.t
    return pipe


def write_estimate_csv(path, results: list[FrameResult]):
    """Write the per-frame estimate log (t, p, q, v, b_a, b_g, f_e)."""
    header = (
        "t,px,py,pz,qw,qx,qy,qz,vx,vy,vz,"
        "bax,bay,baz,bgx,bgy,bgz,fex,fey,fez"
    )
    rows = []
    for r in results:
        s = r.state
        rows.append(
            np.concatenate([[r.t], s.p, s.q, s.v, s.b_a, s.b_g, s.f_e])
        )
    np.savetxt(path, np.array(rows), delimiter=",", header=header, comments="")
