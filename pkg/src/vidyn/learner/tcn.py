"""Causal temporal convolutional networks for residual thrust/torque.

Two identically shaped networks map a 100 ms buffer (10 samples at
100 Hz) of commands and bias-corrected gyroscope measurements to a
constant 3-vector residual: one net for mass-normalized thrust
[N/kg], one for body torque [N m]. Architecture: seven causal
temporal convolutions (4 x 64 filters, then 3 x 128), kernel size 3,
dilation doubling per layer, GELU activations, and a final linear map
from the last time step to the 3-vector output. All parameters and
activations are float64.
"""

from __future__ import annotations

import base64
import json
from pathlib import Path

import numpy as np
import torch
from torch import nn

BUFFER_LEN = 10
IN_CHANNELS = 6  # command 3-vector + gyro 3-vector per time step
CONV_CHANNELS = (64, 64, 64, 64, 128, 128, 128)
KERNEL_SIZE = 3
FORMAT_VERSION = 1


class IncompleteBufferError(ValueError):
    """Raised when an inference buffer has the wrong length or shape."""


class TcnModel(nn.Module):
    """Causal TCN: (batch, 6, T) -> (batch, 3) residual at the last step."""

    def __init__(self, seed: int | None = None):
        super().__init__()
        if seed is not None:
            torch.manual_seed(seed)
        layers = []
        in_ch = IN_CHANNELS
        self.dilations = []
        for i, out_ch in enumerate(CONV_CHANNELS):
            dilation = 2**i
            layers.append(
                nn.Conv1d(in_ch, out_ch, KERNEL_SIZE, dilation=dilation, dtype=torch.float64)
            )
            self.dilations.append(dilation)
            in_ch = out_ch
        self.convs = nn.ModuleList(layers)
        self.act = nn.GELU()
        self.head = nn.Linear(CONV_CHANNELS[-1], 3, dtype=torch.float64)
        # input normalization constants, applied as (x - mean) / std per channel
        self.register_buffer("in_mean", torch.zeros(IN_CHANNELS, dtype=torch.float64))
        self.register_buffer("in_std", torch.ones(IN_CHANNELS, dtype=torch.float64))

    def forward_sequence(self, x: torch.Tensor) -> torch.Tensor:
        """Per-time-step outputs (batch, 3, T); output at step t depends
        only on inputs at steps <= t (left zero-padding keeps every
        convolution causal)."""
        h = (x - self.in_mean[None, :, None]) / self.in_std[None, :, None]
        for conv, dilation in zip(self.convs, self.dilations):
            h = torch.nn.functional.pad(h, (dilation * (KERNEL_SIZE - 1), 0))
            h = self.act(conv(h))
        return self.head(h.transpose(1, 2)).transpose(1, 2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Residual 3-vector from the buffer's last time step: (batch, 3)."""
        return self.forward_sequence(x)[:, :, -1]


def evaluate(model: TcnModel, commands: np.ndarray, gyro: np.ndarray) -> np.ndarray:
    """Residual 3-vector for one complete buffer of 10 command and 10
    bias-corrected gyro samples (oldest first)."""
    commands = np.asarray(commands, dtype=float)
    gyro = np.asarray(gyro, dtype=float)
    if commands.shape != (BUFFER_LEN, 3) or gyro.shape != (BUFFER_LEN, 3):
        raise IncompleteBufferError(
            f"expected ({BUFFER_LEN}, 3) command and gyro buffers, "
            f"got {commands.shape} and {gyro.shape}"
        )
    if not (np.all(np.isfinite(commands)) and np.all(np.isfinite(gyro))):
        raise IncompleteBufferError("buffer contains non-finite samples")
    x = torch.from_numpy(np.concatenate([commands, gyro], axis=1).T[None])
    with torch.no_grad():
        out = model(x)[0].numpy()
    return out


def _encode(t: torch.Tensor) -> dict:
    a = t.detach().numpy().astype("<f8")
    return {"shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}


def _decode(d: dict) -> torch.Tensor:
    a = np.frombuffer(base64.b64decode(d["data"]), dtype="<f8").reshape(d["shape"])
    return torch.from_numpy(a.copy())


def save_model(model: TcnModel, path: str | Path, kind: str = "thrust"):
    """Self-describing JSON container: format version, layer shapes,
    float64 parameters, and input normalization constants."""
    payload = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "buffer_len": BUFFER_LEN,
        "in_channels": IN_CHANNELS,
        "conv_channels": list(CONV_CHANNELS),
        "kernel_size": KERNEL_SIZE,
        "state": {k: _encode(v) for k, v in model.state_dict().items()},
    }
    Path(path).write_text(json.dumps(payload))


def load_model(path: str | Path) -> TcnModel:
    payload = json.loads(Path(path).read_text())
    if payload.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported model format version: {payload.get('format_version')}")
    if tuple(payload["conv_channels"]) != CONV_CHANNELS:
        raise ValueError("model architecture does not match this code version")
    model = TcnModel()
    model.load_state_dict({k: _decode(v) for k, v in payload["state"].items()})
    model.eval()
    return model
