"""Dataset directory export/import.

Layout (one directory per run):
    truth.csv      t, p(3), q(4), v(3), b_a(3), b_g(3), f_wind(3)
    imu.csv        t, a(3), w(3)
    commands.csv   t, thrust(3), torque(3)
    features.csv   t, landmark_id, u, v
    landmarks.csv  id, x, y, z
    meta.json      all params, seed, units

Floats are written as decimal text with 17 significant digits; times in
seconds.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import numpy as np

from .dynamics import BASE_RATE, CommandSchedule, TruthTrajectory
from .params import CameraParams, NoiseParams, QuadrotorParams
from .sensors import FrameObservations, MeasurementStream, SimOutput

FMT = "%.17g"


def _write_csv(path: Path, header: str, array: np.ndarray):
    np.savetxt(path, array, fmt=FMT, delimiter=",", header=header, comments="")


def _params_dict(obj) -> dict:
    d = dataclasses.asdict(obj)
    return {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in d.items()}


def export_run(out: SimOutput, directory: str | Path):
    """Write one simulation run in the dataset directory format."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    truth = out.truth
    ms = out.measurements

    # biases live at the IMU rate; hold them onto the integrator grid
    bias_idx = np.minimum(
        np.searchsorted(ms.imu_times, truth.times + 1e-12) - 1, ms.imu_times.size - 1
    )
    bias_idx = np.maximum(bias_idx, 0)
    truth_rows = np.column_stack(
        [
            truth.times,
            truth.p,
            truth.q,
            truth.v,
            ms.bias_accel[bias_idx],
            ms.bias_gyro[bias_idx],
            truth.f_wind,
        ]
    )
    _write_csv(
        d / "truth.csv",
        "t,px,py,pz,qw,qx,qy,qz,vx,vy,vz,bax,bay,baz,bgx,bgy,bgz,fwx,fwy,fwz",
        truth_rows,
    )
    _write_csv(
        d / "imu.csv",
        "t,ax,ay,az,wx,wy,wz",
        np.column_stack([ms.imu_times, ms.accel, ms.gyro]),
    )
    _write_csv(
        d / "commands.csv",
        "t,ftx,fty,ftz,taux,tauy,tauz",
        np.column_stack([ms.cmd_times, ms.thrust_meas, ms.torque_meas]),
    )
    feat_rows = []
    for fr in ms.frames:
        for lid, px in zip(fr.ids, fr.pixels):
            feat_rows.append([fr.t, float(lid), px[0], px[1]])
    _write_csv(
        d / "features.csv",
        "t,landmark_id,u,v",
        np.asarray(feat_rows) if feat_rows else np.empty((0, 4)),
    )
    if out.landmarks is not None:
        _write_csv(
            d / "landmarks.csv",
            "id,x,y,z",
            np.column_stack([np.arange(len(out.landmarks), dtype=float), out.landmarks]),
        )
    meta = {
        "units": {
            "time": "s", "position": "m", "velocity": "m/s",
            "thrust": "N/kg (mass-normalized)", "torque": "N m",
            "accel": "m/s^2", "gyro": "rad/s", "f_wind": "N (body frame)",
        },
        "integrator_rate_hz": BASE_RATE,
        "quad": _params_dict(out.quad),
        "noise": _params_dict(out.noise),
        "camera": _params_dict(out.camera) if out.camera else None,
        "board_convention": out.meta.get("board_convention"),
        "config": out.meta.get("config"),
    }
    (d / "meta.json").write_text(json.dumps(meta, indent=2, default=_json_default))


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"not JSON serializable: {type(o)}")


def load_run(directory: str | Path) -> SimOutput:
    """Load a run previously written with export_run."""
    d = Path(directory)
    meta = json.loads((d / "meta.json").read_text())
    truth_rows = np.loadtxt(d / "truth.csv", delimiter=",", skiprows=1)
    imu_rows = np.loadtxt(d / "imu.csv", delimiter=",", skiprows=1)
    cmd_rows = np.loadtxt(d / "commands.csv", delimiter=",", skiprows=1)

    truth = TruthTrajectory(
        times=truth_rows[:, 0],
        p=truth_rows[:, 1:4],
        q=truth_rows[:, 4:8],
        v=truth_rows[:, 8:11],
        omega=np.zeros((truth_rows.shape[0], 3)),
        f_specific=np.zeros((truth_rows.shape[0], 3)),
        f_aero=np.zeros((truth_rows.shape[0], 3)),
        f_wind=truth_rows[:, 17:20],
        torque_applied=np.zeros((truth_rows.shape[0], 3)),
    )
    commands = CommandSchedule(
        times=cmd_rows[:, 0], thrust=cmd_rows[:, 1:4], torque=cmd_rows[:, 4:7]
    )

    imu_times = imu_rows[:, 0]
    bias_idx = np.minimum(
        np.searchsorted(truth_rows[:, 0], imu_times + 1e-12) - 1, truth_rows.shape[0] - 1
    )
    bias_idx = np.maximum(bias_idx, 0)

    frames: list[FrameObservations] = []
    feat_path = d / "features.csv"
    if feat_path.exists():
        feats = np.loadtxt(feat_path, delimiter=",", skiprows=1, ndmin=2)
        if feats.size:
            times = np.unique(feats[:, 0])
            for t in times:
                rows = feats[feats[:, 0] == t]
                frames.append(
                    FrameObservations(
                        t=float(t),
                        ids=rows[:, 1].astype(int),
                        pixels=rows[:, 2:4],
                    )
                )

    landmarks = None
    lm_path = d / "landmarks.csv"
    if lm_path.exists():
        lm = np.loadtxt(lm_path, delimiter=",", skiprows=1, ndmin=2)
        if lm.size:
            landmarks = lm[np.argsort(lm[:, 0]), 1:4]

    measurements = MeasurementStream(
        imu_times=imu_times,
        accel=imu_rows[:, 1:4],
        gyro=imu_rows[:, 4:7],
        bias_accel=truth_rows[bias_idx, 11:14],
        bias_gyro=truth_rows[bias_idx, 14:17],
        cmd_times=cmd_rows[:, 0],
        thrust_meas=cmd_rows[:, 1:4],
        torque_meas=cmd_rows[:, 4:7],
        frames=frames,
    )
    quad_cfg = dict(meta["quad"])
    quad = QuadrotorParams(**quad_cfg)
    noise = NoiseParams(**meta["noise"])
    camera = CameraParams(**meta["camera"]) if meta.get("camera") else None
    return SimOutput(
        truth=truth,
        commands=commands,
        measurements=measurements,
        landmarks=landmarks,
        quad=quad,
        noise=noise,
        camera=camera,
        meta=meta,
    )
