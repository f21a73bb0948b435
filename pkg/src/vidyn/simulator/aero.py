"""First-principles aerodynamic force model and parametric wind fields.

The truth aero force is the sum of fuselage drag, induced (propeller)
drag, and, when a dragboard is mounted, flat-plate lift and drag with the
high-angle-of-attack coefficients c_l = sin(2a), c_d = 2 sin^2(a).
Flat-plate convention: drag acts along the airflow, lift perpendicular to
it in the plane spanned by the flow and the board normal, pushing the
board away from its windward side.
"""

from __future__ import annotations

import numpy as np

from .params import QuadrotorParams, WindField

BOARD_NORMAL = np.array([0.0, 1.0, 0.0])  # body frame

_V_EPS = 1e-9


def aero_force_body(
    v_rel: np.ndarray, params: QuadrotorParams, attitude: np.ndarray | None = None
) -> np.ndarray:
    """Aerodynamic force [N] in the body frame.

    v_rel is the vehicle velocity relative to the air, expressed in the
    body frame. The attitude argument is accepted for signature
    compatibility; the model is entirely body-local.
    """
    v_rel = np.asarray(v_rel, dtype=float)
    speed = np.linalg.norm(v_rel)
    if speed < _V_EPS:
        return np.zeros(3)
    v_hat = v_rel / speed
    q_dyn = 0.5 * params.rho * speed * speed

    force = -q_dyn * params.area_fuselage * params.cd_fuselage * v_hat
    force = force - params.k_induced * v_rel

    if params.area_board > 0.0:
        w_hat = -v_hat  # airflow direction over the body
        sin_a = abs(float(v_hat @ BOARD_NORMAL))
        sin_a = min(sin_a, 1.0)
        alpha = np.arcsin(sin_a)
        c_d = 2.0 * sin_a * sin_a
        c_l = np.sin(2.0 * alpha)
        force = force - q_dyn * params.area_board * c_d * v_hat
        n_perp = BOARD_NORMAL - (BOARD_NORMAL @ w_hat) * w_hat
        n_norm = np.linalg.norm(n_perp)
        if n_norm > _V_EPS and c_l > 0.0:
            lift_dir = np.sign(w_hat @ BOARD_NORMAL) * n_perp / n_norm
            force = force + q_dyn * params.area_board * c_l * lift_dir
    return force


def wind_force_truth(
    v_body: np.ndarray,
    wind_body: np.ndarray,
    params: QuadrotorParams,
) -> tuple[np.ndarray, np.ndarray]:
    """Split the total aero force into a no-wind part and the wind force.

    Returns (f_aero_still [N], f_wind [N]), where f_wind is the force the
    wind adds on top of still-air aerodynamics: the difference between the
    aero force with and without the wind contribution to the relative
    velocity. This is the subtraction that defines the wind-force ground
    truth.
    """
    f_with = aero_force_body(v_body - wind_body, params)
    f_still = aero_force_body(v_body, params)
    return f_still, f_with - f_still


def make_wind_field(
    fan_positions: np.ndarray,
    fan_directions: np.ndarray,
    peak_speed: float,
    decay_length: float = 4.0,
    core_radius: float = 0.35,
    spread: float = 0.25,
) -> WindField:
    """Smooth parametric wind cone in front of one or more fans.

    The speed is peak_speed at each fan grill on the fan axis, decays
    exponentially downstream with decay_length, widens linearly with
    spread, and fades smoothly to zero behind the grill. The resulting
    field is C^1 everywhere.
    """
    if peak_speed < 0.0:
        raise ValueError("peak_speed must be non-negative")
    fans = np.atleast_2d(np.asarray(fan_positions, dtype=float))
    dirs = np.atleast_2d(np.asarray(fan_directions, dtype=float))
    dirs = dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    back = 0.3  # m of smooth fade behind the grill

    def smoothstep(x: float) -> float:
        x = min(max(x, 0.0), 1.0)
        return x * x * (3.0 - 2.0 * x)

    def field(p: np.ndarray) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        w = np.zeros(3)
        if peak_speed == 0.0:
            return w
        for fan, d in zip(fans, dirs):
            rel = p - fan
            axial = float(rel @ d)
            radial2 = float(rel @ rel) - axial * axial
            sigma = core_radius + spread * max(axial, 0.0)
            gate = smoothstep((axial + back) / back)
            mag = (
                peak_speed
                * gate
                * np.exp(-max(axial, 0.0) / decay_length)
                * np.exp(-0.5 * radial2 / (sigma * sigma))
            )
            w = w + mag * d
        return w

    return field
