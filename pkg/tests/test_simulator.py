"""Simulator oracle tests: closed-form dynamics, aero values, determinism."""

import numpy as np
import pytest

from vidyn.simulator import (
    BASE_RATE,
    CameraParams,
    CommandGapError,
    CommandSchedule,
    NoiseParams,
    QuadrotorParams,
    WorldParams,
    aero_force_body,
    circle_reference,
    export_run,
    fly_closed_loop,
    hover_reference,
    integrate_truth,
    load_run,
    make_wind_field,
    simulate_run,
    wind_force_truth,
)
from vidyn.simulator.params import DRAGBOARD_AREA

G = 9.81


def _schedule(duration, thrust, torque, rate=100.0):
    n = int(round(duration * rate))
    times = np.arange(n) / rate
    return CommandSchedule(
        times=times,
        thrust=np.tile(np.asarray(thrust, dtype=float), (n, 1)),
        torque=np.tile(np.asarray(torque, dtype=float), (n, 1)),
    )


def _vacuum_quad(**kw):
    return QuadrotorParams(k_induced=0.0, area_fuselage=0.0, area_board=0.0, **kw)


class TestClosedFormDynamics:
    def test_hover_equilibrium(self):
        # thrust exactly cancels gravity at rest: the state must not move
        quad = QuadrotorParams()
        world = WorldParams()
        cmds = _schedule(10.0, [0.0, 0.0, G], [0.0, 0.0, 0.0])
        truth = integrate_truth(quad, world, cmds, 10.0)
        assert np.max(np.abs(truth.p)) < 1e-9
        assert np.max(np.abs(truth.v)) < 1e-9
        assert np.max(np.abs(truth.omega)) < 1e-9
        # identity attitude throughout
        assert np.max(np.abs(truth.q - np.array([1.0, 0, 0, 0]))) < 1e-12

    def test_free_fall_closed_form(self):
        # zero thrust, no aero: z(t) = -g t^2 / 2, v_z(t) = -g t
        quad = _vacuum_quad()
        cmds = _schedule(2.0, [0.0, 0.0, 0.0], [0.0, 0.0, 0.0])
        truth = integrate_truth(quad, WorldParams(), cmds, 2.0)
        t = truth.times
        assert np.max(np.abs(truth.p[:, 2] - (-0.5 * G * t**2))) < 1e-6
        assert np.max(np.abs(truth.v[:, 2] - (-G * t))) < 1e-6
        assert np.max(np.abs(truth.p[:, :2])) < 1e-12

    def test_constant_torque_spin_up(self):
        # torque about a principal axis from rest: omega_z = tau_z t / J_z
        quad = _vacuum_quad()
        tau_z = 2e-4
        cmds = _schedule(3.0, [0.0, 0.0, G], [0.0, 0.0, tau_z])
        truth = integrate_truth(quad, WorldParams(), cmds, 3.0)
        expected = tau_z * truth.times / quad.inertia[2]
        assert np.max(np.abs(truth.omega[:, 2] - expected)) < 1e-6
        assert np.max(np.abs(truth.omega[:, :2])) < 1e-12

    def test_ballistic_energy_conservation(self):
        # no thrust, no aero: E = |v|^2/2 + g z is an exact invariant
        quad = _vacuum_quad()
        cmds = _schedule(4.0, [0.0, 0.0, 0.0], [0.0, 0.0, 0.0])
        truth = integrate_truth(
            quad, WorldParams(), cmds, 4.0, initial={"v": [2.0, -1.0, 5.0]}
        )
        energy = 0.5 * np.sum(truth.v**2, axis=1) + G * truth.p[:, 2]
        assert np.max(np.abs(energy - energy[0])) / abs(energy[0]) < 1e-6

    def test_torque_free_euler_invariants(self):
        # torque-free rotation: kinetic energy and |J w|^2 are conserved
        quad = _vacuum_quad()
        cmds = _schedule(5.0, [0.0, 0.0, G], [0.0, 0.0, 0.0])
        truth = integrate_truth(
            quad, WorldParams(), cmds, 5.0, initial={"omega": [3.0, 2.0, 1.0]}
        )
        J = quad.inertia
        ke = 0.5 * np.sum(J * truth.omega**2, axis=1)
        h2 = np.sum((J * truth.omega) ** 2, axis=1)
        assert np.max(np.abs(ke - ke[0])) / ke[0] < 1e-6
        assert np.max(np.abs(h2 - h2[0])) / h2[0] < 1e-6

    def test_command_gap_raises(self):
        cmds = _schedule(1.0, [0.0, 0.0, G], [0.0, 0.0, 0.0])
        with pytest.raises(CommandGapError):
            integrate_truth(QuadrotorParams(), WorldParams(), cmds, 2.0)


class TestAeroOracles:
    def test_induced_drag_value(self):
        # linear propeller drag alone: |f| = k |v| = 0.145 N at 1 m/s
        quad = QuadrotorParams(area_fuselage=0.0)
        f = aero_force_body(np.array([1.0, 0.0, 0.0]), quad)
        assert np.allclose(f, [-0.145, 0.0, 0.0], atol=1e-12)

    def test_fuselage_drag_value(self):
        # quadratic drag alone: 0.5 * 1.204 * 0.015 * 2.0 * 9 = 0.162540 N
        quad = QuadrotorParams(k_induced=0.0)
        f = aero_force_body(np.array([0.0, 3.0, 0.0]), quad)
        assert np.allclose(f, [0.0, -0.16254, 0.0], atol=1e-12)

    def test_board_broadside_drag(self):
        # flow normal to the board at 7 m/s: c_d = 2, c_l = 0,
        # |f_board| = 0.5 * 1.204 * 49 * 0.0352 * 2 = 2.0766592 N (pure drag)
        quad = QuadrotorParams(k_induced=0.0, area_fuselage=0.0, area_board=DRAGBOARD_AREA)
        f = aero_force_body(np.array([0.0, 7.0, 0.0]), quad)
        expected_mag = 0.5 * 1.204 * 49.0 * DRAGBOARD_AREA * 2.0
        assert abs(expected_mag - 2.0766592) < 1e-6
        assert np.allclose(f, [0.0, -expected_mag, 0.0], atol=1e-12)

    def test_board_oblique_lift_and_drag(self):
        # flow at 45 deg to the board in the x-y plane: c_l = 1, c_d = 1.
        # Drag opposes velocity; lift is perpendicular, pushing away from
        # the windward face (here toward -y on the n/flow plane).
        quad = QuadrotorParams(k_induced=0.0, area_fuselage=0.0, area_board=DRAGBOARD_AREA)
        s = np.sqrt(0.5)
        v = 5.0 * np.array([s, s, 0.0])
        f = aero_force_body(v, quad)
        q_dyn = 0.5 * 1.204 * 25.0
        drag = -q_dyn * DRAGBOARD_AREA * 1.0 * np.array([s, s, 0.0])
        # airflow w = -v_hat has w.n < 0 -> lift along -(n - (n.w)w)/|..|
        lift = q_dyn * DRAGBOARD_AREA * 1.0 * -np.array([-s, s, 0.0])
        assert np.allclose(f, drag + lift, atol=1e-12)

    def test_board_edge_on_is_inert(self):
        quad = QuadrotorParams(area_board=DRAGBOARD_AREA)
        bare = QuadrotorParams()
        v = np.array([4.0, 0.0, 1.0])  # no y component: zero angle of attack
        assert np.allclose(aero_force_body(v, quad), aero_force_body(v, bare))

    def test_wind_force_subtraction(self):
        quad = QuadrotorParams()
        v = np.array([1.0, 2.0, 0.5])
        w = np.array([-3.0, 0.5, 0.0])
        f_still, f_wind = wind_force_truth(v, w, quad)
        assert np.allclose(f_still, aero_force_body(v, quad))
        assert np.allclose(f_still + f_wind, aero_force_body(v - w, quad))
        # no wind -> exactly zero wind force
        _, f0 = wind_force_truth(v, np.zeros(3), quad)
        assert np.all(f0 == 0.0)

    def test_zero_velocity_zero_force(self):
        quad = QuadrotorParams(area_board=DRAGBOARD_AREA)
        assert np.all(aero_force_body(np.zeros(3), quad) == 0.0)


class TestWindField:
    def test_peak_at_grill_and_decay(self):
        field = make_wind_field(
            fan_positions=[[0.0, 0.0, 0.0]],
            fan_directions=[[1.0, 0.0, 0.0]],
            peak_speed=5.0,
            decay_length=4.0,
        )
        at_grill = field(np.zeros(3))
        assert np.allclose(at_grill, [5.0, 0.0, 0.0], atol=1e-12)
        downstream = field(np.array([4.0, 0.0, 0.0]))
        assert np.allclose(downstream, [5.0 / np.e, 0.0, 0.0], atol=1e-12)
        # monotone decay along the axis
        speeds = [np.linalg.norm(field(np.array([x, 0.0, 0.0]))) for x in np.linspace(0, 8, 30)]
        assert np.all(np.diff(speeds) < 0)

    def test_zero_behind_fan_and_off_axis_falloff(self):
        field = make_wind_field([[0.0, 0.0, 0.0]], [[1.0, 0.0, 0.0]], 5.0)
        assert np.all(field(np.array([-0.5, 0.0, 0.0])) == 0.0)
        on_axis = np.linalg.norm(field(np.array([2.0, 0.0, 0.0])))
        off_axis = np.linalg.norm(field(np.array([2.0, 2.0, 0.0])))
        assert off_axis < 0.1 * on_axis


class TestClosedLoopFlight:
    def test_hover_tracking_is_tight(self):
        quad = QuadrotorParams()
        truth, cmds = fly_closed_loop(quad, WorldParams(), hover_reference(), 5.0)
        assert np.max(np.abs(truth.p)) < 1e-6
        assert np.allclose(cmds.thrust[:, 2], G, atol=1e-6)

    def test_circle_tracking(self):
        quad = QuadrotorParams()
        ref = circle_reference(radius=1.5, speed=2.0, ramp=3.0)
        truth, _ = fly_closed_loop(quad, WorldParams(), ref, 12.0)
        after = truth.times > 4.0
        err = np.array(
            [np.linalg.norm(truth.p[i] - ref.pos(truth.times[i]))
             for i in np.nonzero(after)[0][::50]]
        )
        assert np.max(err) < 0.15

    def test_miscalibration_injection(self):
        quad = QuadrotorParams()
        ref = hover_reference()
        offset = np.array([1e-4, -2e-4, 3e-4])
        truth_a, cmds_a = fly_closed_loop(quad, WorldParams(), ref, 2.0)
        truth_b, cmds_b = fly_closed_loop(
            quad, WorldParams(), ref, 2.0,
            thrust_meas_scale=0.95, torque_meas_offset=offset,
        )
        # the flight itself is unchanged; only the recorded commands shift
        assert np.array_equal(truth_a.p, truth_b.p)
        assert np.allclose(cmds_b.thrust, 0.95 * cmds_a.thrust)
        assert np.allclose(cmds_b.torque, cmds_a.torque + offset)


class TestDeterminismAndRates:
    CONFIG = {
        "seed": 7,
        "duration": 3.0,
        "trajectory": {"type": "circle", "radius": 1.0, "speed": 1.5, "ramp": 2.0},
        "noise": {
            "sigma_accel": 0.05, "sigma_gyro": 0.005,
            "sigma_bias_accel": 1e-3, "sigma_bias_gyro": 1e-4,
            "sigma_thrust": 0.02, "sigma_torque": 1e-4, "sigma_pixel": 0.5,
        },
        "landmarks": {"num": 200},
    }

    def test_same_seed_bitwise_identical(self):
        a = simulate_run(self.CONFIG)
        b = simulate_run(self.CONFIG)
        assert np.array_equal(a.truth.p, b.truth.p)
        assert np.array_equal(a.truth.q, b.truth.q)
        assert np.array_equal(a.measurements.accel, b.measurements.accel)
        assert np.array_equal(a.measurements.gyro, b.measurements.gyro)
        assert np.array_equal(a.measurements.thrust_meas, b.measurements.thrust_meas)
        for fa, fb in zip(a.measurements.frames, b.measurements.frames):
            assert np.array_equal(fa.pixels, fb.pixels)

    def test_different_seed_differs(self):
        a = simulate_run(self.CONFIG)
        b = simulate_run({**self.CONFIG, "seed": 8})
        assert not np.array_equal(a.measurements.accel, b.measurements.accel)

    def test_stream_rates_align_bitwise(self):
        out = simulate_run({**self.CONFIG, "noise": {}})
        ms = out.measurements
        n = ms.imu_times.size
        assert np.array_equal(ms.imu_times, np.arange(n) / 200.0)
        # IMU timestamps sit exactly on integrator grid points
        assert np.all(np.isin(ms.imu_times, out.truth.times))
        assert np.array_equal(ms.cmd_times, np.arange(ms.cmd_times.size) / 100.0)
        cam_times = np.array([fr.t for fr in ms.frames])
        assert np.array_equal(cam_times, np.arange(cam_times.size) / 30.0)
        # all sensor clocks divide the integrator rate
        for rate in (200.0, 100.0, 30.0):
            assert abs(round(BASE_RATE / rate) * rate - BASE_RATE) < 1e-12

    def test_camera_frames_have_features(self):
        out = simulate_run(self.CONFIG)
        counts = [fr.ids.size for fr in out.measurements.frames]
        assert np.median(counts) >= 10


class TestClosure:
    def test_force_log_replay_reproduces_run(self):
        # replaying the logged aero forces must reproduce the trajectory
        quad = QuadrotorParams(area_board=DRAGBOARD_AREA)
        wind = make_wind_field([[-2.0, 0.0, 0.0]], [[1.0, 0.0, 0.0]], 4.0)
        world = WorldParams(wind=wind)
        cmds = _schedule(2.0, [0.0, 0.0, G], [1e-5, -1e-5, 0.0])
        log = []
        truth = integrate_truth(quad, world, cmds, 2.0, force_log=log)
        # replay against a world with no wind model at all
        replayed = integrate_truth(
            quad, WorldParams(), cmds, 2.0, force_replay=log
        )
        assert np.max(np.abs(truth.p - replayed.p)) < 1e-8
        assert np.max(np.abs(truth.q - replayed.q)) < 1e-8
        assert np.max(np.abs(truth.v - replayed.v)) < 1e-8


class TestDatasetRoundTrip:
    def test_export_load_round_trip(self, tmp_path):
        out = simulate_run(
            {
                "seed": 3,
                "duration": 2.0,
                "trajectory": {"type": "circle", "radius": 1.0, "speed": 1.0, "ramp": 1.5},
                "noise": {"sigma_accel": 0.02, "sigma_gyro": 0.002,
                          "sigma_bias_accel": 1e-3, "sigma_bias_gyro": 1e-4},
                "landmarks": {"num": 150},
            }
        )
        export_run(out, tmp_path / "run")
        back = load_run(tmp_path / "run")
        # 17-significant-digit decimal text round-trips doubles exactly
        assert np.array_equal(back.truth.p, out.truth.p)
        assert np.array_equal(back.truth.q, out.truth.q)
        assert np.array_equal(back.measurements.accel, out.measurements.accel)
        assert np.array_equal(back.measurements.gyro, out.measurements.gyro)
        assert np.array_equal(back.measurements.thrust_meas, out.measurements.thrust_meas)
        assert np.array_equal(back.landmarks, out.landmarks)
        assert len(back.measurements.frames) == len(out.measurements.frames)
        for fa, fb in zip(out.measurements.frames, back.measurements.frames):
            assert fa.t == fb.t
            assert np.array_equal(fa.ids, fb.ids)
            assert np.array_equal(fa.pixels, fb.pixels)
        assert back.quad.mass == out.quad.mass
        assert np.array_equal(back.quad.inertia, out.quad.inertia)
        assert back.noise.seed == out.noise.seed

    def test_expected_files_exist(self, tmp_path):
        out = simulate_run({"seed": 1, "duration": 1.0, "landmarks": {"num": 50}})
        export_run(out, tmp_path / "run")
        for name in ("truth.csv", "imu.csv", "commands.csv",
                     "features.csv", "landmarks.csv", "meta.json"):
            assert (tmp_path / "run" / name).exists()
