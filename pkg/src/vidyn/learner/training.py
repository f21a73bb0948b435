"""Training loops for the residual thrust/torque networks.

Windows are cut from closed-loop simulator runs recorded without
external forces: one window per preintegration span, stride equal to
the span. Each window carries a 100 ms input buffer (10 command and 10
bias-corrected gyro samples at 100 Hz ending at the prediction time)
and the ground-truth motion delta over the following span. Supervision
may optionally be degraded with slow positional drift to emulate
offline-SLAM ground truth instead of motion-capture-grade truth.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import torch

from ..geometry import quat_multiply_raw, quat_normalize, quat_to_rot
from .losses import thrust_window_loss, torque_window_loss
from .tcn import BUFFER_LEN, TcnModel

GRAVITY = np.array([0.0, 0.0, -9.81])


@dataclass
class TrainConfig:
    """Adam training configuration shared by both networks."""

    lr: float = 1e-4
    epochs: int = 40
    batch_size: int = 64
    split: float = 0.8  # train fraction; remainder is validation
    bias_sigma: float = 1e-3  # gyro-bias augmentation std [rad/s]
    seed: int = 0
    truth_drift_sigma: float = 0.0  # slow positional drift on supervision [m/sqrt(s)]

    def __post_init__(self):
        if self.lr <= 0.0:
            raise ValueError("learning rate must be positive")
        if not 0.0 < self.split < 1.0:
            raise ValueError("train split must be in (0, 1)")


@dataclass
class WindowSet:
    """Tensor-ready training windows from one or more runs."""

    buffers: np.ndarray  # (N, 6, 10): commands then gyro, channel-major
    span_cmd: np.ndarray  # (N, n, 3) commands driving the span
    span_rates: np.ndarray  # (N, n, 3) bias-corrected gyro over the span
    omega0: np.ndarray  # (N, 3) bias-corrected rate at span start
    alpha: np.ndarray  # (N, 3) truth position delta, start frame
    beta: np.ndarray  # (N, 3) truth velocity delta, start frame
    gamma: np.ndarray  # (N, 4) truth orientation delta
    dt: float
    run_ids: np.ndarray = field(default=None)

    def __len__(self):
        return self.buffers.shape[0]


class DatasetError(ValueError):
    """Raised when runs lack the streams needed to build windows."""


def _cmd_rate_gyro(out) -> np.ndarray:
    """Bias-corrected gyro resampled onto the command grid."""
    ms = out.measurements
    idx = np.searchsorted(ms.imu_times, ms.cmd_times - 1e-9)
    idx = np.clip(idx, 0, ms.imu_times.size - 1)
    if np.max(np.abs(ms.imu_times[idx] - ms.cmd_times)) > 1e-6:
        raise DatasetError("command grid does not align with the IMU grid")
    return (ms.gyro - ms.bias_gyro)[idx]


def build_windows(
    runs,
    which: str,
    span_steps: int = 10,
    drift_sigma: float = 0.0,
    seed: int = 0,
) -> WindowSet:
    """Cut prediction windows from simulator runs.

    which selects the command channel ("thrust" or "torque"). Windows
    start once a full input buffer exists and advance by one span.
    """
    if which not in ("thrust", "torque"):
        raise ValueError(f"unknown channel: {which}")
    rng = np.random.default_rng(seed)
    bufs, span_cmd, span_rates, omega0 = [], [], [], []
    alphas, betas, gammas, run_ids = [], [], [], []
    dt = None
    for rid, out in enumerate(runs):
        ms = out.measurements
        truth = out.truth
        if truth.p.shape[0] == 0:
            raise DatasetError("run lacks ground-truth states")
        cmds = ms.thrust_meas if which == "thrust" else ms.torque_meas
        gyro = _cmd_rate_gyro(out)
        times = ms.cmd_times
        dt_run = float(times[1] - times[0])
        if dt is None:
            dt = dt_run
        elif abs(dt - dt_run) > 1e-9:
            raise DatasetError("runs have mismatched command rates")

        p, v, q = truth.p.copy(), truth.v, truth.q
        if drift_sigma > 0.0:
            # slow random-walk drift at 1 Hz, linearly interpolated onto the
            # truth grid: offline-SLAM-grade supervision surrogate
            knots = np.arange(0.0, truth.times[-1] + 1.0, 1.0)
            walk = np.cumsum(
                rng.standard_normal((knots.size, 3)) * drift_sigma, axis=0
            )
            drift = np.column_stack(
                [np.interp(truth.times, knots, walk[:, a]) for a in range(3)]
            )
            p = p + drift

        first = BUFFER_LEN - 1
        for k in range(first, times.size - span_steps, span_steps):
            t_i, t_j = times[k], times[k + span_steps]
            i, j = truth.index_of(t_i), truth.index_of(t_j)
            R_i = quat_to_rot(q[i])
            dt_span = t_j - t_i
            alphas.append(
                R_i.T @ (p[j] - p[i] - v[i] * dt_span - 0.5 * GRAVITY * dt_span**2)
            )
            betas.append(R_i.T @ (v[j] - v[i] - GRAVITY * dt_span))
            q_i_inv = q[i] * np.array([1.0, -1.0, -1.0, -1.0])
            gammas.append(quat_normalize(quat_multiply_raw(q_i_inv, q[j])))
            bufs.append(
                np.concatenate(
                    [cmds[k - first : k + 1], gyro[k - first : k + 1]], axis=1
                ).T
            )
            span_cmd.append(cmds[k : k + span_steps])
            span_rates.append(gyro[k : k + span_steps])
            omega0.append(gyro[k])
            run_ids.append(rid)
    if not bufs:
        raise DatasetError("runs too short to cut any training window")
    return WindowSet(
        buffers=np.asarray(bufs),
        span_cmd=np.asarray(span_cmd),
        span_rates=np.asarray(span_rates),
        omega0=np.asarray(omega0),
        alpha=np.asarray(alphas),
        beta=np.asarray(betas),
        gamma=np.asarray(gammas),
        dt=dt,
        run_ids=np.asarray(run_ids),
    )


def _split_indices(ws: WindowSet, split: float, rng: np.random.Generator):
    """Hold out whole runs when there are enough; otherwise hold out
    windows (a single-run dataset cannot be split by trajectory)."""
    runs = np.unique(ws.run_ids)
    if runs.size >= 5:
        n_train = max(1, int(round(split * runs.size)))
        perm = rng.permutation(runs)
        train_runs = set(perm[:n_train].tolist())
        train = np.nonzero(np.isin(ws.run_ids, list(train_runs)))[0]
        val = np.nonzero(~np.isin(ws.run_ids, list(train_runs)))[0]
    else:
        perm = rng.permutation(len(ws))
        n_train = max(1, int(round(split * len(ws))))
        train, val = perm[:n_train], perm[n_train:]
    if val.size == 0:
        val = train[-1:]
    return train, val


def _augment(buffers: torch.Tensor, sigma: float, gen: torch.Generator) -> torch.Tensor:
    """Add a per-window constant gyro-bias sample to the gyro channels."""
    if sigma <= 0.0:
        return buffers
    bias = torch.randn(buffers.shape[0], 3, 1, generator=gen, dtype=buffers.dtype) * sigma
    out = buffers.clone()
    out[:, 3:6, :] += bias
    return out


def _normalize_from(model: TcnModel, buffers: np.ndarray):
    mean = buffers.mean(axis=(0, 2))
    std = buffers.std(axis=(0, 2))
    std[std < 1e-6] = 1.0
    model.in_mean.copy_(torch.from_numpy(mean))
    model.in_std.copy_(torch.from_numpy(std))


def _train(
    ws: WindowSet,
    config: TrainConfig,
    loss_fn,
    extra_tensors: dict,
) -> tuple[TcnModel, dict]:
    rng = np.random.default_rng(config.seed)
    gen = torch.Generator().manual_seed(config.seed)
    model = TcnModel(seed=config.seed)
    train_idx, val_idx = _split_indices(ws, config.split, rng)
    _normalize_from(model, ws.buffers[train_idx])

    tensors = {"buffers": torch.from_numpy(ws.buffers)}
    tensors.update({k: torch.from_numpy(v) for k, v in extra_tensors.items()})
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)

    def batch_loss(idx: np.ndarray, augment: bool) -> torch.Tensor:
        buf = tensors["buffers"][idx]
        if augment:
            buf = _augment(buf, config.bias_sigma, gen)
        args = [buf] + [tensors[k][idx] for k in extra_tensors] + [ws.dt]
        return loss_fn(model, *args)

    history = {"train": [], "val": [], "time_s": 0.0}
    t0 = time.perf_counter()
    with torch.no_grad():
        history["val"].append(float(batch_loss(val_idx, augment=False)))
    for _ in range(config.epochs):
        perm = rng.permutation(train_idx)
        losses = []
        for s in range(0, perm.size, config.batch_size):
            idx = perm[s : s + config.batch_size]
            opt.zero_grad()
            loss = batch_loss(idx, augment=True)
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
        history["train"].append(float(np.mean(losses)))
        with torch.no_grad():
            history["val"].append(float(batch_loss(val_idx, augment=False)))
    history["time_s"] = time.perf_counter() - t0
    model.eval()
    return model, history


def train_thrust_net(runs, config: TrainConfig) -> tuple[TcnModel, dict]:
    """Train the residual-thrust network through the translational
    preintegration loss on runs recorded without external forces."""
    ws = build_windows(
        runs, "thrust", drift_sigma=config.truth_drift_sigma, seed=config.seed
    )
    return _train(
        ws,
        config,
        thrust_window_loss,
        {
            "span_thrust": ws.span_cmd,
            "span_rates": ws.span_rates,
            "alpha_true": ws.alpha,
            "beta_true": ws.beta,
        },
    )


def train_torque_net(runs, config: TrainConfig) -> tuple[TcnModel, dict]:
    """Train the residual-torque network through direct Euler integration
    of the rotational rigid-body model (the B-spline fit is bypassed
    during training; see module docstring)."""
    ws = build_windows(
        runs, "torque", drift_sigma=config.truth_drift_sigma, seed=config.seed
    )
    inertia = np.asarray(runs[0].quad.inertia, dtype=float)

    def loss_fn(model, buffers, span_torque, omega0, gamma_true, dt):
        return torque_window_loss(
            model, buffers, span_torque, omega0, gamma_true,
            torch.from_numpy(inertia), dt,
        )

    ws_tensors = {
        "span_torque": ws.span_cmd,
        "omega0": ws.omega0,
        "gamma_true": ws.gamma,
    }
    return _train(ws, config, loss_fn, ws_tensors)
