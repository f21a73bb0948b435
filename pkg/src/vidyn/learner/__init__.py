"""Residual thrust/torque learning: causal TCNs trained through
differentiable Euler preintegration of the vehicle dynamics."""

from .losses import (
    integrate_rotation_torch,
    preintegrate_thrust_torch,
    quat_error_sq,
    quat_exp_t,
    quat_mul_t,
    quat_rotate_t,
    thrust_window_loss,
    torque_window_loss,
)
from .tcn import (
    BUFFER_LEN,
    IncompleteBufferError,
    TcnModel,
    evaluate,
    load_model,
    save_model,
)
from .training import (
    DatasetError,
    TrainConfig,
    WindowSet,
    build_windows,
    train_thrust_net,
    train_torque_net,
)

__all__ = [
    "BUFFER_LEN",
    "DatasetError",
    "IncompleteBufferError",
    "TcnModel",
    "TrainConfig",
    "WindowSet",
    "build_windows",
    "evaluate",
    "integrate_rotation_torch",
    "load_model",
    "preintegrate_thrust_torch",
    "quat_error_sq",
    "quat_exp_t",
    "quat_mul_t",
    "quat_rotate_t",
    "save_model",
    "thrust_window_loss",
    "torque_window_loss",
    "train_thrust_net",
    "train_torque_net",
]
