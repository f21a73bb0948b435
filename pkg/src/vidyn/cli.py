"""Command-line surface: simulate, train, estimate, evaluate, benchmark.

Every subcommand exits nonzero with a single machine-parsable JSON line
on stderr (``{"error": "..."}``) when inputs are invalid. The HDV_SEED
environment variable overrides configured seeds for reproducible CI.
"""

from __future__ import annotations

import functools
import json
import os
import sys
from pathlib import Path

import click
import numpy as np

from .estimator.pipeline import EstimatorConfig, run_pipeline, write_estimate_csv
from .evaluation import (
    align_posyaw,
    compute_metrics,
    resample_trajectory,
    rotate_to_world,
    validate_report,
)
from .rotdyn_fit import benchmark_parameterizations
from .simulator import export_run, load_run, simulate_run


def _fail(message: str, code: int = 1):
    click.echo(json.dumps({"error": message}), err=True)
    sys.exit(code)


def _guarded(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (click.ClickException, SystemExit):
            raise
        except Exception as exc:  # noqa: BLE001 - CLI boundary
            _fail(f"{type(exc).__name__}: {exc}")

    return wrapper


def _seed_override(seed: int) -> int:
    env = os.environ.get("HDV_SEED")
    return int(env) if env else int(seed)


def _load_json(path: str) -> dict:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    return json.loads(p.read_text())


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def _ints(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


@click.group()
def main():
    """Visual-inertial-dynamics odometry toolkit."""


@main.command()
@click.option("--config", "config_path", required=True, help="Simulation config JSON.")
@click.option("--out", "out_dir", required=True, help="Output dataset directory.")
@_guarded
def simulate(config_path, out_dir):
    """Run one closed-loop simulation and write the dataset directory."""
    cfg = _load_json(config_path)
    cfg["seed"] = _seed_override(cfg.get("seed", 0))
    out = simulate_run(cfg)
    export_run(out, out_dir)
    click.echo(f"wrote {out_dir} ({len(out.measurements.frames)} frames, seed {cfg['seed']})")


@main.command()
@click.option("--net", type=click.Choice(["thrust", "torque"]), required=True)
@click.option("--data", "data_dirs", multiple=True, required=True,
              help="Dataset directories (repeatable).")
@click.option("--out", "out_path", required=True, help="Model JSON output path.")
@click.option("--epochs", default=40, show_default=True)
@click.option("--lr", default=1e-4, show_default=True)
@click.option("--batch-size", default=64, show_default=True)
@click.option("--seed", default=0, show_default=True)
@_guarded
def train(net, data_dirs, out_path, epochs, lr, batch_size, seed):
    """Train a residual network through the preintegration loss."""
    from .learner import TrainConfig, save_model, train_thrust_net, train_torque_net

    runs = [load_run(d) for d in data_dirs]
    cfg = TrainConfig(
        lr=lr, epochs=epochs, batch_size=batch_size, seed=_seed_override(seed)
    )
    trainer = train_thrust_net if net == "thrust" else train_torque_net
    model, history = trainer(runs, cfg)
    save_model(model, out_path, kind=net)
    Path(str(out_path) + ".history.json").write_text(json.dumps(history))
    final = history["val"][-1] if history.get("val") else float("nan")
    click.echo(f"wrote {out_path} (final val loss {final:.6g})")


@main.command()
@click.option("--config", "config_path", default=None, help="Estimator config JSON.")
@click.option("--data", "data_dir", required=True, help="Dataset directory.")
@click.option("--mode", type=click.Choice(["vio", "vimo", "hdvio", "hdvio2"]),
              default=None, help="Overrides the config's mode.")
@click.option("--thrust-model", default=None, help="Residual-thrust model JSON.")
@click.option("--torque-model", default=None, help="Residual-torque model JSON.")
@click.option("--out", "out_dir", required=True, help="Output directory.")
@_guarded
def estimate(config_path, data_dir, mode, thrust_model, torque_model, out_dir):
    """Run the sliding-window estimator over a dataset."""
    cfg = _load_json(config_path) if config_path else {}
    if mode is not None:
        cfg["mode"] = mode
    config = EstimatorConfig(**cfg)
    sim = load_run(data_dir)
    if sim.camera is None or not sim.measurements.frames:
        raise ValueError(f"dataset has no camera frames: {data_dir}")
    models = {}
    if thrust_model or torque_model:
        from .learner import load_model

        if thrust_model:
            models["thrust_model"] = load_model(thrust_model)
        if torque_model:
            models["torque_model"] = load_model(torque_model)
    pipe = run_pipeline(sim, config, **models)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_estimate_csv(out / "estimate.csv", pipe.results)
    force_rows = np.array(
        [np.concatenate([[r.t], r.state.f_e]) for r in pipe.results]
    )
    np.savetxt(out / "force.csv", force_rows, delimiter=",",
               header="t,fex,fey,fez", comments="")
    wall = [r.wall_time_s for r in pipe.results[1:]]
    meta = {
        "mode": config.mode,
        "data": str(data_dir),
        "config": cfg,
        "frames": len(pipe.results),
        "starved_frames": int(sum(r.starved for r in pipe.results)),
        "wall_time_s": wall,
    }
    (out / "meta.json").write_text(json.dumps(meta))
    click.echo(f"wrote {out_dir} ({len(pipe.results)} frames, mode {config.mode})")


def _load_estimate_dir(est_dir: Path):
    rows = np.loadtxt(est_dir / "estimate.csv", delimiter=",", skiprows=1, ndmin=2)
    est = {
        "t": rows[:, 0], "p": rows[:, 1:4], "q": rows[:, 4:8], "v": rows[:, 8:11],
        "b_a": rows[:, 11:14], "b_g": rows[:, 14:17], "f_e": rows[:, 17:20],
    }
    meta_path = est_dir / "meta.json"
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    return est, meta


def _load_truth_dir(truth_dir: Path):
    rows = np.loadtxt(truth_dir / "truth.csv", delimiter=",", skiprows=1, ndmin=2)
    meta = json.loads((truth_dir / "meta.json").read_text())
    return {
        "t": rows[:, 0], "p": rows[:, 1:4], "q": rows[:, 4:8], "v": rows[:, 8:11],
        "b_a": rows[:, 11:14], "b_g": rows[:, 14:17], "f_wind": rows[:, 17:20],
        "mass": float(meta["quad"]["mass"]),
    }


@main.command()
@click.option("--est", "est_dir", required=True, help="Estimate directory.")
@click.option("--truth", "truth_dir", required=True, help="Dataset directory with truth.csv.")
@click.option("--out", "out_path", required=True, help="Report JSON path.")
@click.option("--distances", default="2,5,10", show_default=True,
              help="Relative-error distance bins [m].")
@_guarded
def evaluate(est_dir, truth_dir, out_path, distances):
    """Score an estimate against ground truth and write report.json."""
    est_dir, truth_dir = Path(est_dir), Path(truth_dir)
    est, meta = _load_estimate_dir(est_dir)
    truth = _load_truth_dir(truth_dir)
    pair = align_posyaw(est["t"], est["p"], est["q"], truth["t"], truth["p"], truth["q"])

    # external forces compared mass-normalized in the world frame,
    # rotated there with the ground-truth orientations
    sel = np.isin(est["t"], pair.times)
    fw = np.column_stack(
        [np.interp(pair.times, truth["t"], truth["f_wind"][:, a]) for a in range(3)]
    )
    force_truth = rotate_to_world(pair.q_truth, fw / truth["mass"])
    force_est = rotate_to_world(pair.q_truth, est["f_e"][sel])

    report = compute_metrics(
        pair,
        force_est=force_est,
        force_truth=force_truth,
        wall_times_s=meta.get("wall_time_s") or None,
        distances=tuple(_floats(distances)),
    )
    report.sources = {"est": str(est_dir), "truth": str(truth_dir)}
    doc = report.to_dict()
    validate_report(doc)
    Path(out_path).write_text(json.dumps(doc, indent=2))
    click.echo(
        f"wrote {out_path} (ATE_T {doc['ate_t_m']:.4g} m, ATE_R {doc['ate_r_deg']:.4g} deg)"
    )


@main.command("bench-spline")
@click.option("--orders", default="5,6,7", show_default=True)
@click.option("--spacings", default="5,10,20,50", show_default=True,
              help="Control-point spacings [ms].")
@click.option("--segments", default="0.1,0.2,0.5,1.0", show_default=True,
              help="Segment lengths [s].")
@click.option("--rates", default="100,200", show_default=True,
              help="Input sample rates [Hz].")
@click.option("--n-segments", default=5, show_default=True,
              help="Random segments per grid cell.")
@click.option("--seed", default=0, show_default=True)
@click.option("--out", "out_path", required=True, help="Benchmark CSV path.")
@_guarded
def bench_spline(orders, spacings, segments, rates, n_segments, seed, out_path):
    """Convergence-time table over both spline parameterizations."""
    seed = _seed_override(seed)
    rows = []
    for segment in _floats(segments):
        for rate in _floats(rates):
            rows.extend(
                benchmark_parameterizations(
                    orders=_ints(orders),
                    spacings=[s / 1e3 for s in _floats(spacings)],
                    segment_length=segment,
                    input_rate=rate,
                    n_segments=n_segments,
                    seed=seed,
                )
            )
    with open(out_path, "w") as fh:
        fh.write(
            "parameterization,order,spacing_ms,segment_s,rate_hz,"
            "mean_ms,std_ms,mean_iterations\n"
        )
        for r in rows:
            fh.write(
                f"{r['parameterization']},{r['order']},{1e3 * r['dt']:g},"
                f"{r['segment_length']:g},{r['input_rate']:g},"
                f"{r['mean_ms']:.6g},{r['std_ms']:.6g},{r['mean_iterations']:.3g}\n"
            )
    click.echo(f"wrote {out_path} ({len(rows)} rows)")


@main.command()
@click.option("--report", "report_path", required=True, help="report.json from evaluate.")
@click.option("--out", "out_dir", required=True, help="Output directory for CSV series.")
@_guarded
def plotdata(report_path, out_dir):
    """Emit plot-ready CSV series (force/bias traces, error vs distance)."""
    doc = _load_json(report_path)
    validate_report(doc)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    rel = doc.get("relative_errors", [])
    with open(out / "error_vs_distance.csv", "w") as fh:
        fh.write("distance_m,n_pairs,trans_rmse_m,rot_rmse_deg\n")
        for row in rel:
            fh.write(
                f"{row['distance_m']:g},{row['n_pairs']},"
                f"{row['trans_rmse_m']:.6g},{row['rot_rmse_deg']:.6g}\n"
            )
    written = ["error_vs_distance.csv"]

    sources = doc.get("sources", {})
    est_dir = sources.get("est")
    truth_dir = sources.get("truth")
    if est_dir and truth_dir and Path(est_dir).exists() and Path(truth_dir).exists():
        est, _ = _load_estimate_dir(Path(est_dir))
        truth = _load_truth_dir(Path(truth_dir))
        t = est["t"]
        inside = (t >= truth["t"][0]) & (t <= truth["t"][-1])
        t = t[inside]
        _, q_truth = resample_trajectory(t, truth["t"], truth["p"], truth["q"])
        f_est_w = rotate_to_world(q_truth, est["f_e"][inside])
        fw = np.column_stack(
            [np.interp(t, truth["t"], truth["f_wind"][:, a]) for a in range(3)]
        )
        f_truth_w = rotate_to_world(q_truth, fw / truth["mass"])
        np.savetxt(
            out / "force_traces.csv",
            np.column_stack([t, f_est_w, f_truth_w]),
            delimiter=",",
            header="t,est_fx,est_fy,est_fz,truth_fx,truth_fy,truth_fz",
            comments="",
        )
        bias_truth = np.column_stack(
            [np.interp(t, truth["t"], np.column_stack([truth["b_a"], truth["b_g"]])[:, a])
             for a in range(6)]
        )
        np.savetxt(
            out / "bias_traces.csv",
            np.column_stack([t, est["b_a"][inside], est["b_g"][inside], bias_truth]),
            delimiter=",",
            header="t,est_bax,est_bay,est_baz,est_bgx,est_bgy,est_bgz,"
                   "truth_bax,truth_bay,truth_baz,truth_bgx,truth_bgy,truth_bgz",
            comments="",
        )
        written += ["force_traces.csv", "bias_traces.csv"]
    click.echo(f"wrote {out_dir} ({', '.join(written)})")


if __name__ == "__main__":
    main()
