"""Synthetic quadrotor world: dynamics, aero, wind, sensors, datasets."""

from .aero import BOARD_NORMAL, aero_force_body, make_wind_field, wind_force_truth
from .dataset import export_run, load_run
from .dynamics import (
    BASE_RATE,
    CommandGapError,
    CommandSchedule,
    DivergedError,
    TruthTrajectory,
    integrate_truth,
)
from .params import (
    DRAGBOARD_AREA,
    CameraParams,
    NoiseParams,
    QuadrotorParams,
    WorldParams,
)
from .run import DEFAULT_CONFIG, simulate_run
from .sensors import (
    FrameObservations,
    MeasurementStream,
    SimOutput,
    make_landmarks,
    project_landmarks,
    synthesize_sensors,
)
from .trajectories import (
    ControllerGains,
    Reference,
    circle_reference,
    fly_closed_loop,
    gp_random_reference,
    hover_reference,
    lemniscate_reference,
)

__all__ = [
    "BASE_RATE",
    "BOARD_NORMAL",
    "DEFAULT_CONFIG",
    "DRAGBOARD_AREA",
    "CameraParams",
    "CommandGapError",
    "CommandSchedule",
    "ControllerGains",
    "DivergedError",
    "FrameObservations",
    "MeasurementStream",
    "NoiseParams",
    "QuadrotorParams",
    "Reference",
    "SimOutput",
    "TruthTrajectory",
    "WorldParams",
    "aero_force_body",
    "circle_reference",
    "export_run",
    "fly_closed_loop",
    "gp_random_reference",
    "hover_reference",
    "integrate_truth",
    "lemniscate_reference",
    "load_run",
    "make_landmarks",
    "make_wind_field",
    "project_landmarks",
    "simulate_run",
    "synthesize_sensors",
    "wind_force_truth",
]
