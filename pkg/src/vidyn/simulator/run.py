"""Config-driven simulation runs."""

from __future__ import annotations

import numpy as np

from .aero import make_wind_field
from .params import DRAGBOARD_AREA, CameraParams, NoiseParams, QuadrotorParams, WorldParams
from .sensors import SimOutput, make_landmarks, synthesize_sensors
from .trajectories import (
    ControllerGains,
    circle_reference,
    gp_random_reference,
    hover_reference,
    lemniscate_reference,
)
from .trajectories import fly_closed_loop

DEFAULT_CONFIG = {
    "seed": 0,
    "duration": 20.0,
    "cmd_rate": 100.0,
    "trajectory": {"type": "circle", "radius": 1.5, "speed": 2.0},
    "quad": {"dragboard": False},
    "wind": None,
    "constant_force": [0.0, 0.0, 0.0],
    "noise": {},
    "camera": {},
    "landmarks": {"num": 500},
    "thrust_meas_scale": 1.0,
    "torque_meas_offset": [0.0, 0.0, 0.0],
}


def _reference_from_config(cfg: dict, seed: int, duration: float):
    kind = cfg.get("type", "circle")
    if kind == "hover":
        return hover_reference(cfg.get("position", (0.0, 0.0, 0.0)))
    if kind == "circle":
        return circle_reference(
            radius=cfg.get("radius", 1.5),
            speed=cfg.get("speed", 2.0),
            center=cfg.get("center", (0.0, 0.0, 0.0)),
            ramp=cfg.get("ramp", 3.0),
        )
    if kind == "lemniscate":
        return lemniscate_reference(
            scale=cfg.get("scale", 2.0),
            speed=cfg.get("speed", 2.0),
            center=cfg.get("center", (0.0, 0.0, 0.0)),
            ramp=cfg.get("ramp", 3.0),
        )
    if kind == "gp_random":
        return gp_random_reference(
            seed=cfg.get("seed", seed),
            duration=duration,
            amplitude=cfg.get("amplitude", 1.2),
            length_scale=cfg.get("length_scale", 1.8),
        )
    raise ValueError(f"unknown trajectory type: {kind}")


def simulate_run(config: dict) -> SimOutput:
    """Run one closed-loop simulation described by a config dict.

    Unspecified keys fall back to DEFAULT_CONFIG. The returned SimOutput
    is a pure function of the config (seed included).
    """
    cfg = {**DEFAULT_CONFIG, **config}
    seed = int(cfg["seed"])
    duration = float(cfg["duration"])

    quad_cfg = dict(cfg.get("quad") or {})
    dragboard = quad_cfg.pop("dragboard", False)
    quad = QuadrotorParams(**quad_cfg)
    if dragboard:
        quad.area_board = DRAGBOARD_AREA

    wind_cfg = cfg.get("wind")
    wind = None
    if wind_cfg:
        wind = make_wind_field(
            fan_positions=np.asarray(wind_cfg.get("fan_positions", [[-3.0, 0.0, 0.0]])),
            fan_directions=np.asarray(wind_cfg.get("fan_directions", [[1.0, 0.0, 0.0]])),
            peak_speed=float(wind_cfg.get("peak_speed", 5.0)),
            decay_length=float(wind_cfg.get("decay_length", 4.0)),
            core_radius=float(wind_cfg.get("core_radius", 0.35)),
            spread=float(wind_cfg.get("spread", 0.25)),
        )
    world = WorldParams(wind=wind, constant_force=np.asarray(cfg["constant_force"], dtype=float))

    reference = _reference_from_config(dict(cfg.get("trajectory") or {}), seed, duration)
    torque_offset = np.asarray(cfg["torque_meas_offset"], dtype=float)
    truth, commands = fly_closed_loop(
        quad,
        world,
        reference,
        duration,
        cmd_rate=float(cfg["cmd_rate"]),
        gains=ControllerGains(),
        thrust_meas_scale=float(cfg["thrust_meas_scale"]),
        torque_meas_offset=torque_offset if np.any(torque_offset) else None,
    )

    noise = NoiseParams(**(cfg.get("noise") or {}), seed=seed) if "seed" not in (
        cfg.get("noise") or {}
    ) else NoiseParams(**cfg["noise"])

    camera = None
    landmarks = None
    if cfg.get("camera") is not None:
        camera = CameraParams(**(cfg.get("camera") or {}))
        lm_cfg = dict(cfg.get("landmarks") or {})
        span = np.ptp(truth.p, axis=0)
        center = 0.5 * (truth.p.max(axis=0) + truth.p.min(axis=0))
        box_min = np.asarray(
            lm_cfg.get(
                "box_min",
                center - np.array([span[0] / 2 + 3.0, span[1] / 2 + 3.0, 0.0]) - np.array([0, 0, 5.0]),
            )
        )
        box_max = np.asarray(
            lm_cfg.get(
                "box_max",
                center + np.array([span[0] / 2 + 3.0, span[1] / 2 + 3.0, -2.0]),
            )
        )
        landmarks = make_landmarks(int(lm_cfg.get("num", 500)), box_min, box_max, seed + 1)

    measurements = synthesize_sensors(truth, commands, noise, camera, landmarks)
    return SimOutput(
        truth=truth,
        commands=commands,
        measurements=measurements,
        landmarks=landmarks,
        quad=quad,
        noise=noise,
        camera=camera,
        meta={"config": cfg, "board_convention": "drag along airflow, lift perpendicular in flow/normal plane, away from windward side"},
    )
