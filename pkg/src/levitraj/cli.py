"""Command-line pipeline: calibrate -> solve -> simulate -> evaluate -> export-plots.

Exit codes: 0 success, 2 infeasible shape/size, 3 solver failure, 4 bad
configuration.  Every file is SI with a header row.  ``LEVITRAJ_THREADS``
sets the number of concurrent simulation trials.
"""
from __future__ import annotations

import json
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path

import click
import numpy as np

from . import acoustics, forcemodel, ocp, paths, sim, trapsolve

EXIT_INFEASIBLE = 2
EXIT_SOLVER = 3
EXIT_CONFIG = 4

# test shapes: (width m, period s)
TEST_SHAPES = {
    "circle": (0.070, 1 / 15),
    "cardioid": (0.0909, 0.100),
    "squircle": (0.053, 0.100),
    "fish": (0.0876, 0.100),
}

log = logging.getLogger("levitraj")


class ConfigError(click.ClickException):
    exit_code = EXIT_CONFIG


class Infeasible(click.ClickException):
    exit_code = EXIT_INFEASIBLE


class SolverError(click.ClickException):
    exit_code = EXIT_SOLVER


def _read_json(path) -> dict:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"{p}: file not found")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}")


def _outdir(path) -> Path:
    p = Path(path)
    try:
        p.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {p}: {exc}")
    probe = p / ".write-test"
    try:
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise ConfigError(f"output directory {p} is not writable: {exc}")
    return p


def _params(calibration) -> forcemodel.ForceParams:
    if calibration is None:
        return forcemodel.ForceParams.device()
    doc = _read_json(calibration)
    try:
        return forcemodel.Calibration.from_dict(doc).device
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{calibration}: not a calibration file ({exc})")


def _shape(shape_file, kind, size, plane) -> paths.ReferencePath:
    try:
        if shape_file is not None:
            if not Path(shape_file).exists():
                raise ConfigError(f"{shape_file}: file not found")
            if Path(shape_file).suffix.lower() == ".json":
                spec = paths.load_shape(_read_json(shape_file))
            else:
                spec = paths.load_shape(shape_file)
            if size is not None:
                spec.size_m = size
            return spec.build()
        if kind is None or size is None:
            raise ConfigError("give --shape FILE or both --kind and --size")
        return paths.make_builtin(kind, size, plane=plane)
    except (ValueError, paths.PathDomainError) as exc:
        raise ConfigError(f"bad shape: {exc}")


def _ocp_config(**kw) -> ocp.OcpConfig:
    try:
        return ocp.OcpConfig(**{k: v for k, v in kw.items() if v is not None})
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc))


def _design(path, params, cfg, period, auto_gamma, allow_slower=False):
    try:
        return trapsolve.design_trajectory(path, params, cfg, period=period, auto_gamma=auto_gamma,
                                           allow_slower=allow_slower)
    except ocp.InfeasibleError as exc:
        raise Infeasible(f"infeasible: {exc}")
    except trapsolve.RecoveryError as exc:
        raise Infeasible(f"infeasible: trap recovery failed: {exc}")
    except ocp.SolverFailure as exc:
        raise SolverError(f"solver failure: {exc}")


def _dump(path, doc):
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"not serialisable: {type(o)}")


shape_options = [
    click.option("--shape", "shape_file", type=click.Path(dir_okay=False),
                 help="Shape JSON (kind/waypoints/size_m/plane/center_m) or waypoint CSV."),
    click.option("--kind", type=click.Choice(sorted(paths.BUILTINS)),
                 help="Builtin shape instead of --shape."),
    click.option("--size", type=float, help="Horizontal width in metres."),
    click.option("--plane", type=click.Choice(sorted(paths.PLANES)), default="xz", show_default=True,
                 help="Plane of builtin shapes."),
]


def with_options(opts):
    def deco(f):
        for o in reversed(opts):
            f = o(f)
        return f
    return deco


@click.group()
@click.option("-v", "--verbose", count=True, help="More logging (repeatable).")
def main(verbose):
    """Time-optimal trap trajectories for levitated persistence-of-vision shapes."""
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


# --------------------------------------------------------------------------

@main.command()
@click.option("--array-config", type=click.Path(dir_okay=False),
              help="ArrayConfig JSON (grid, pitch, separation, frequency, ...). Defaults to the 2x256 levitator.")
@click.option("--traps-per-axis", type=int, default=3, show_default=True,
              help="Trap grid is N x N x N within +-2 cm of the centre.")
@click.option("--probes", type=int, default=100, show_default=True, help="Probe points per trap.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out", type=click.Path(file_okay=False), default="calibration", show_default=True)
def calibrate(array_config, traps_per_axis, probes, seed, out):
    """Fit the force models to the acoustic oracle.

    Writes calibration.json (fitted and device-scaled parameters) and
    model_errors.csv (mean relative error of each model).
    """
    if array_config is not None:
        doc = _read_json(array_config)
        try:
            cfg = acoustics.ArrayConfig.from_dict(doc)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{array_config}: {exc}")
    else:
        cfg = acoustics.ArrayConfig()
    if traps_per_axis < 1 or probes < 2:
        raise ConfigError("need at least one trap and two probes")
    outdir = _outdir(out)
    oracle = acoustics.TwinTrapOracle(cfg=cfg)
    try:
        oracle.particle.check(cfg)
        cal, data = forcemodel.calibrate(oracle.force, traps_per_axis, probes, seed)
    except (RuntimeError, ValueError) as exc:
        raise SolverError(f"fit failed: {exc}")
    cal.save(outdir / "calibration.json")
    forcemodel.write_error_report(cal.errors, outdir / "model_errors.csv", samples=len(data.d))
    for name in ("spring", "sinusoidal", "axis-symmetric"):
        click.echo(f"{name:15s} {100 * cal.errors[name]:6.2f} %")


@main.command()
@with_options(shape_options)
@click.option("--calibration", type=click.Path(dir_okay=False),
              help="calibration.json; defaults to the published device parameters.")
@click.option("--gamma", type=float, help="Regularisation weight (dimensionless). Default 1e-4.")
@click.option("--auto-gamma", is_flag=True, help="Pick the smallest gamma whose traps never move against the particle.")
@click.option("--epsilon", type=float, help="Back-off margin on the trigonometric variables. Default 0.05.")
@click.option("--nodes", type=int, help="Collocation intervals. Default 240.")
@click.option("--boundary", type=click.Choice(["periodic", "rest"]), default="periodic", show_default=True,
              help="rest: emit a ramp from rest followed by one full period.")
@click.option("--max-iter", type=int, help="Interior-point iteration limit.")
@click.option("--period", type=float, help="Required period in seconds; exit 2 if it cannot be met.")
@click.option("--ramp-laps", type=click.IntRange(1, 8), default=1, show_default=True,
              help="Laps of run-up from rest (rest boundary only).")
@click.option("--out", type=click.Path(file_okay=False), default="solution", show_default=True)
def solve(shape_file, kind, size, plane, calibration, gamma, auto_gamma, epsilon, nodes, boundary,
          max_iter, period, ramp_laps, out):
    """Timing law and device-rate trap trajectory for one shape.

    Writes timing.json and traps.csv (t, u_x, u_y, u_z at 10 kHz) with a
    traps.json sidecar holding the reference samples and solve metadata.
    """
    path = _shape(shape_file, kind, size, plane)
    params = _params(calibration)
    cfg = _ocp_config(gamma=gamma, epsilon=epsilon, nodes=nodes, max_iter=max_iter)
    outdir = _outdir(out)
    traj = _design(path, params, cfg, period, auto_gamma)
    ocp.save_timing(traj.timing, outdir / "timing.json")
    emitted = traj
    if boundary == "rest":
        try:
            ramp = trapsolve.ramp_up(path, params, traj, replace(cfg, gamma=traj.timing.gamma),
                                     laps=ramp_laps)
        except (ocp.InfeasibleError, trapsolve.RecoveryError) as exc:
            raise Infeasible(f"infeasible ramp: {exc} (a time-optimal orbit leaves no force for "
                             f"speeding up; try a --period above the minimum or more --ramp-laps)")
        except ocp.SolverFailure as exc:
            raise SolverError(f"solver failure on the ramp: {exc}")
        emitted = trapsolve.splice(ramp, traj, 1)
        ocp.save_timing(ramp.timing, outdir / "ramp_timing.json")
    emitted.save(outdir / "traps.csv")
    click.echo(f"T = {traj.T * 1e3:.3f} ms  gamma = {traj.timing.gamma:g}  "
               f"epsilon = {traj.meta['epsilon']:.3f}  samples = {len(emitted)}")


@main.command()
@click.option("--traps", type=click.Path(dir_okay=False), required=True, help="traps.csv from solve.")
@with_options(shape_options)
@click.option("--calibration", type=click.Path(dir_okay=False))
@click.option("--duration", type=float, help="Seconds to simulate (default: whole periods covering 2 s).")
@click.option("--dt", type=float, help="Integrator step (default 1/(10 rate)).")
@click.option("--gravity", is_flag=True, help="Include gravity (off by default).")
@click.option("--out", type=click.Path(file_okay=False), default="simulation", show_default=True)
def simulate(traps, shape_file, kind, size, plane, calibration, duration, dt, gravity, out):
    """RK4 particle simulation of a trap trajectory.

    Writes trace.csv (t, p, deviation e, horizontal and vertical
    acceleration); with a shape also metrics.json (RMSE, path-normalised RMSE).
    """
    if not Path(traps).exists():
        raise ConfigError(f"{traps}: file not found")
    try:
        traj = trapsolve.TrapTrajectory.load(traps)
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{traps}: {exc}")
    params = _params(calibration)
    if dt is not None and dt > 1.0 / (10 * traj.rate) + 1e-15:
        raise ConfigError(f"dt must not exceed {1.0 / (10 * traj.rate):g} s")
    outdir = _outdir(out)
    trace = sim.simulate(traj, params, dt=dt, duration=duration, gravity=gravity)
    path = None
    if shape_file is not None or kind is not None:
        path = _shape(shape_file, kind, size, plane)
        trace.attach_path(path)
    trace.to_csv(outdir / "trace.csv")
    if trace.escaped:
        click.echo(f"particle escaped at t = {trace.escape_time:.4f} s")
        _dump(outdir / "metrics.json", {"escaped": True, "escape_time": trace.escape_time})
        return
    if path is not None and traj.periodic:
        whole = max(1, math.floor((trace.t[-1] - trace.t[0]) / traj.T + 1e-6)) * traj.T
        m = sim.metrics(trace, path, min_duration=min(2.0, whole))
        doc = {k: m[k] for k in ("rmse", "rmse_normalized", "max_error", "path_length", "periods")}
        doc["escaped"] = False
        _dump(outdir / "metrics.json", doc)
        click.echo(f"RMSE {m['rmse'] * 1e3:.4f} mm  normalised {m['rmse_normalized']:.4f}")
    else:
        click.echo("particle stayed trapped")


@main.command()
@click.option("--kind", "kinds", multiple=True, type=click.Choice(sorted(TEST_SHAPES)),
              help="Shapes to evaluate (repeatable; default all four test shapes).")
@click.option("--calibration", type=click.Path(dir_okay=False))
@click.option("--trials", type=int, default=10, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--position-sigma", type=float, default=1e-4, show_default=True, help="Initial offset std (m).")
@click.option("--force-jitter", type=float, default=0.05, show_default=True, help="Relative force-scale jitter.")
@click.option("--out", type=click.Path(file_okay=False), default="evaluation", show_default=True)
def evaluate(kinds, calibration, trials, seed, position_sigma, force_jitter, out):
    """Perturbed-trial comparison of optimised and baseline timings.

    Each shape runs at its test size and period.  Writes report.csv and
    report.md with successes, mean path-normalised RMSE and escape counts for
    optitrap, baseline-arc and baseline-param timings.
    """
    if trials < 1:
        raise ConfigError("need at least one trial")
    params = _params(calibration)
    outdir = _outdir(out)
    noise = sim.NoiseSpec(position_sigma, force_jitter)
    rows = []
    for kind in kinds or sorted(TEST_SHAPES):
        width, period = TEST_SHAPES[kind]
        path = paths.make_builtin(kind, width)
        traj = _design(path, params, ocp.OcpConfig(), period, auto_gamma=True, allow_slower=True)
        T = traj.T
        runs = {"optitrap": traj}
        for strategy in ("arc", "param"):
            runs[f"baseline-{strategy}"] = trapsolve.baseline_trajectory(
                path, round(period * trapsolve.DEVICE_RATE) / trapsolve.DEVICE_RATE, strategy,
                ramp=sim.BASELINE_RAMP)
        for name, run in runs.items():
            rep = sim.perturbed_trials(run, params, path, n=trials, noise=noise, seed=seed)
            rows.append({"shape": kind, "timing": name, "width_m": width,
                         "period_s": T if name == "optitrap" else run.meta["orbit_T"],
                         "trials": trials, "successes": rep.successes, "success": rep.success,
                         "rmse_normalized": rep.rmse_normalized, "max_error_m": rep.max_error})
            click.echo(f"{kind:9s} {name:15s} {rep.successes:3d}/{trials}  "
                       f"nRMSE {rep.rmse_normalized:.4f}")
    cols = list(rows[0])
    with open(outdir / "report.csv", "w") as fh:
        fh.write(",".join(cols) + "\n")
        for r in rows:
            fh.write(",".join(_fmt(r[c]) for c in cols) + "\n")
    with open(outdir / "report.md", "w") as fh:
        fh.write("| " + " | ".join(cols) + " |\n")
        fh.write("|" + "---|" * len(cols) + "\n")
        for r in rows:
            fh.write("| " + " | ".join(_fmt(r[c]) for c in cols) + " |\n")


def _fmt(v) -> str:
    if isinstance(v, bool):
        return str(v).lower()
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


@main.command("export-plots")
@with_options(shape_options)
@click.option("--calibration", type=click.Path(dir_okay=False))
@click.option("--period", type=float, default=0.1, show_default=True)
@click.option("--gamma", type=float, help="Fixed gamma; default picks it automatically.")
@click.option("--out", type=click.Path(file_okay=False), default="plots", show_default=True)
def export_plots(shape_file, kind, size, plane, calibration, period, gamma, out):
    """Acceleration and speed profiles (CSV per panel) for one shape.

    accel_<timing>.csv holds t, theta, horizontal and vertical acceleration,
    total acceleration and speed of the reference motion over one period for
    the optimised timing and both baselines.
    """
    path = _shape(shape_file, kind, size, plane)
    params = _params(calibration)
    outdir = _outdir(out)
    cfg = _ocp_config(gamma=gamma)
    traj = _design(path, params, cfg, period, auto_gamma=gamma is None, allow_slower=True)
    runs = {"optitrap": traj}
    T = round(traj.T * trapsolve.DEVICE_RATE) / trapsolve.DEVICE_RATE
    for strategy in ("arc", "param"):
        runs[f"baseline-{strategy}"] = trapsolve.baseline_trajectory(path, T, strategy)
    proj = sim.NearestPoint(path)
    for name, run in runs.items():
        dt = 1.0 / run.rate
        acc = paths.finite_difference_accel(run.q, dt, periodic=True)
        vel = (np.roll(run.q, -1, 0) - np.roll(run.q, 1, 0)) / (2 * dt)
        theta = proj(run.q)[0]
        with open(outdir / f"accel_{name}.csv", "w") as fh:
            fh.write("t,theta,a_h,a_z,a_norm,speed\n")
            for i in range(len(run.t)):
                a = acc[i]
                fh.write(",".join(repr(float(x)) for x in (
                    run.t[i], theta[i], math.hypot(a[0], a[1]), a[2], np.linalg.norm(a),
                    np.linalg.norm(vel[i]))) + "\n")
    click.echo(f"wrote {len(runs)} profiles to {outdir}")


if __name__ == "__main__":
    main()
