"""Trajectory and force evaluation.

Estimates are aligned to ground truth with a translation + yaw (pos-yaw)
transform — the gauge freedoms of a visual-inertial estimator — then
scored as absolute trajectory errors (RMS position, RMS geodesic
rotation angle), relative errors over fixed travel distances, and
external-force RMSE. Reports serialize to a versioned JSON schema.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources

import numpy as np
from scipy.spatial.transform import Rotation, Slerp

from .geometry import quat_conjugate, quat_multiply, quat_to_axis_angle, quat_to_rot

REPORT_SCHEMA_VERSION = 1


class AlignmentError(ValueError):
    """Raised when two trajectories share fewer than two common samples."""


def _slerp(times: np.ndarray, quats_wxyz: np.ndarray, query: np.ndarray) -> np.ndarray:
    """Spherical interpolation of a w-first quaternion track."""
    rot = Rotation.from_quat(quats_wxyz[:, [1, 2, 3, 0]])
    out = Slerp(times, rot)(query).as_quat()
    return out[:, [3, 0, 1, 2]]


def resample_trajectory(t_query, times, p, q, v=None):
    """Linear interpolation of positions/velocities, slerp of orientations."""
    t_query = np.asarray(t_query, dtype=float)
    p_out = np.column_stack([np.interp(t_query, times, p[:, a]) for a in range(3)])
    q_out = _slerp(times, q, t_query)
    if v is None:
        return p_out, q_out
    v_out = np.column_stack([np.interp(t_query, times, v[:, a]) for a in range(3)])
    return p_out, q_out, v_out


@dataclass
class AlignedTrajectoryPair:
    """Estimate and truth on common timestamps, estimate already aligned."""

    times: np.ndarray
    p_est: np.ndarray
    q_est: np.ndarray
    p_truth: np.ndarray
    q_truth: np.ndarray
    yaw: float  # applied rotation about world z [rad]
    translation: np.ndarray  # applied translation [m]


def yaw_rotation(yaw: float) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def align_posyaw(
    t_est, p_est, q_est, t_truth, p_truth, q_truth
) -> AlignedTrajectoryPair:
    """Least-squares translation + yaw alignment of the estimate.

    Truth is resampled onto the estimate's timestamps over the common
    time span; the 1-dof yaw comes in closed form from the horizontal
    cross-covariance and the translation from the centroids.
    """
    t_est = np.asarray(t_est, dtype=float)
    t0 = max(t_est[0], t_truth[0])
    t1 = min(t_est[-1], t_truth[-1])
    sel = (t_est >= t0 - 1e-9) & (t_est <= t1 + 1e-9)
    if int(sel.sum()) < 2:
        raise AlignmentError("trajectories share fewer than two common samples")
    times = t_est[sel]
    pe = np.asarray(p_est, dtype=float)[sel]
    qe = np.asarray(q_est, dtype=float)[sel]
    pt, qt = resample_trajectory(times, np.asarray(t_truth, dtype=float), p_truth, q_truth)

    ce, ct = pe.mean(axis=0), pt.mean(axis=0)
    de, dt = pe - ce, pt - ct
    C = dt[:, :2].T @ de[:, :2]
    yaw = np.arctan2(C[1, 0] - C[0, 1], C[0, 0] + C[1, 1])
    Rz = yaw_rotation(yaw)
    trans = ct - Rz @ ce
    q_yaw = np.array([np.cos(0.5 * yaw), 0.0, 0.0, np.sin(0.5 * yaw)])
    qa = np.array([quat_multiply(q_yaw, q) for q in qe])
    return AlignedTrajectoryPair(
        times=times,
        p_est=pe @ Rz.T + trans,
        q_est=qa,
        p_truth=pt,
        q_truth=qt,
        yaw=float(yaw),
        translation=trans,
    )


def ate_translation(pair: AlignedTrajectoryPair) -> float:
    """RMS position error after alignment [m]."""
    d = pair.p_est - pair.p_truth
    return float(np.sqrt(np.mean(np.sum(d * d, axis=1))))


def _geodesic_angles(q_a: np.ndarray, q_b: np.ndarray) -> np.ndarray:
    return np.array(
        [
            np.linalg.norm(quat_to_axis_angle(quat_multiply(quat_conjugate(a), b)))
            for a, b in zip(q_a, q_b)
        ]
    )


def ate_rotation_deg(pair: AlignedTrajectoryPair) -> float:
    """RMS geodesic rotation angle after alignment [deg]."""
    ang = _geodesic_angles(pair.q_truth, pair.q_est)
    return float(np.degrees(np.sqrt(np.mean(ang * ang))))


def relative_errors(
    pair: AlignedTrajectoryPair,
    distances=(2.0, 5.0, 10.0),
    max_starts: int = 200,
) -> list[dict]:
    """Relative pose errors over fixed travel distances.

    For each start sample and distance bin, the truth and estimated
    relative motions (expressed in the respective start body frames) are
    compared; per-bin RMS translation and rotation errors are reported.
    """
    seg = np.linalg.norm(np.diff(pair.p_truth, axis=0), axis=1)
    path = np.concatenate([[0.0], np.cumsum(seg)])
    n = len(path)
    stride = max(1, n // max_starts)
    out = []
    for d in distances:
        terr, rerr = [], []
        for i in range(0, n, stride):
            j = int(np.searchsorted(path, path[i] + d))
            if j >= n:
                break
            Rt = quat_to_rot(pair.q_truth[i])
            Re = quat_to_rot(pair.q_est[i])
            dt = Rt.T @ (pair.p_truth[j] - pair.p_truth[i])
            de = Re.T @ (pair.p_est[j] - pair.p_est[i])
            terr.append(de - dt)
            q_rel_t = quat_multiply(quat_conjugate(pair.q_truth[i]), pair.q_truth[j])
            q_rel_e = quat_multiply(quat_conjugate(pair.q_est[i]), pair.q_est[j])
            ang = np.linalg.norm(
                quat_to_axis_angle(quat_multiply(quat_conjugate(q_rel_t), q_rel_e))
            )
            rerr.append(ang)
        if terr:
            terr = np.array(terr)
            rerr = np.array(rerr)
            out.append(
                {
                    "distance_m": float(d),
                    "n_pairs": len(rerr),
                    "trans_rmse_m": float(np.sqrt(np.mean(np.sum(terr * terr, axis=1)))),
                    "rot_rmse_deg": float(np.degrees(np.sqrt(np.mean(rerr * rerr)))),
                }
            )
        else:
            out.append(
                {"distance_m": float(d), "n_pairs": 0, "trans_rmse_m": 0.0, "rot_rmse_deg": 0.0}
            )
    return out


def force_rmse(f_est: np.ndarray, f_truth: np.ndarray) -> dict:
    """Per-axis and norm RMSE between two force tracks [N/kg]."""
    f_est = np.asarray(f_est, dtype=float)
    f_truth = np.asarray(f_truth, dtype=float)
    d = f_est - f_truth
    per_axis = np.sqrt(np.mean(d * d, axis=0))
    dn = np.linalg.norm(f_est, axis=1) - np.linalg.norm(f_truth, axis=1)
    return {
        "x": float(per_axis[0]),
        "y": float(per_axis[1]),
        "z": float(per_axis[2]),
        "norm": float(np.sqrt(np.mean(dn * dn))),
    }


def rotate_to_world(q_truth: np.ndarray, f_body: np.ndarray) -> np.ndarray:
    """Express body-frame force rows in the world frame via truth attitude."""
    return np.array([quat_to_rot(q) @ f for q, f in zip(q_truth, f_body)])


@dataclass
class RunReport:
    """All evaluation metrics of one run."""

    ate_t_m: float
    ate_r_deg: float
    relative: list = field(default_factory=list)
    force: dict | None = None
    wall_time_ms: dict | None = None
    n_samples: int = 0
    notes: dict = field(default_factory=lambda: {"rotation_error_metric": "geodesic"})
    sources: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "ate_t_m": self.ate_t_m,
            "ate_r_deg": self.ate_r_deg,
            "relative_errors": self.relative,
            "force_rmse_n_per_kg": self.force,
            "wall_time_ms": self.wall_time_ms,
            "n_samples": self.n_samples,
            "notes": self.notes,
            "sources": self.sources,
        }


def wall_time_stats(wall_times_s) -> dict:
    ms = 1e3 * np.asarray(wall_times_s, dtype=float)
    return {
        "mean": float(np.mean(ms)),
        "median": float(np.median(ms)),
        "p90": float(np.percentile(ms, 90)),
        "max": float(np.max(ms)),
    }


def compute_metrics(
    pair: AlignedTrajectoryPair,
    force_est=None,
    force_truth=None,
    wall_times_s=None,
    distances=(2.0, 5.0, 10.0),
) -> RunReport:
    """Full metric set for one aligned run."""
    return RunReport(
        ate_t_m=ate_translation(pair),
        ate_r_deg=ate_rotation_deg(pair),
        relative=relative_errors(pair, distances),
        force=(
            force_rmse(force_est, force_truth)
            if force_est is not None and force_truth is not None
            else None
        ),
        wall_time_ms=wall_time_stats(wall_times_s) if wall_times_s is not None else None,
        n_samples=len(pair.times),
    )


def report_schema() -> dict:
    text = resources.files("vidyn").joinpath("schemas/report-v1.json").read_text()
    return json.loads(text)


def validate_report(report: dict):
    """Raise jsonschema.ValidationError if the report breaks the schema."""
    import jsonschema

    jsonschema.validate(report, report_schema())
