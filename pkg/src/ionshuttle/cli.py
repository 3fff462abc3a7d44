"""Command-line front end.

Every subcommand reads an optional JSON config, merges it over the defaults
below, writes its artifacts into a scratch directory and moves them into the
output directory only on success.  Exit status: 0 success, 2 invalid input,
3 numerical failure.
"""
from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import os
import shutil
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from . import errors, formats
from .waveform_synth import config_hash

logger = logging.getLogger("ionshuttle")

OUT_ENV = "IONSHUTTLE_OUT"
EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 2, 3

DEFAULTS = {
    "trap": {"n_segments": 10, "pitch": 280e-6, "radial_frequency": 2 * np.pi * 2e6,
             "start_segment": 4, "grid": None},
    "trajectory": {"distance": 280e-6, "duration": 12.8e-6, "dt": 80e-9, "profile": "poly5",
                   "omega_x": 2 * np.pi * 230e3},
    "filter": {"cutoff": 63.2e3, "method": "matched", "actual_cutoff": None},
    "synthesis": {"slew": 0.2, "voltage_bounds": [-10.0, 10.0], "hold_steps": 100,
                  "dwell_precession_time": 69.44e-3},
    "detection": {"thresholds": None, "objective": "auto", "target": [0.964, 0.985],
                  "calibration_trials": 10000},
    "analysis": {"bootstrap": True, "resamples": 10000, "bins": 10, "failed_transports": 0,
                 "dark_prior_sigma": 0.3},
    "simulation": {"fidelity": 0.999994, "decay_rate": 4.0, "precession_time": 69.44e-3,
                   "transports": [2, 4000], "phases": 19, "repetitions": 100,
                   "prep_fidelity": 1.0, "pi_fidelity": 1.0,
                   "tracking": {"f_s": 2e-3, "bright_rate": 0.1194, "dark_total": 23.5,
                                "transports": 4000, "skipped": [0, 100, 200, 300],
                                "runs_per_point": 125},
                   "motion_substeps": 8},
}


class ConfigError(errors.InvalidArgument):
    pass


def _merge(base: dict, override: dict, where: str = ""):
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in base:
            raise ConfigError(f"unknown config key '{where}{key}'")
        if isinstance(base[key], dict) and base[key] and isinstance(value, dict):
            out[key] = _merge(base[key], value, f"{where}{key}.")
        else:
            out[key] = value
    return out


def load_config(path=None, seed=None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError("config must be a JSON object")
        cfg_seed = user.pop("seed", None)
        seed = cfg_seed if seed is None else seed
        cfg = _merge(cfg, user)
    cfg["seed"] = seed
    return cfg


# ------------------------------------------------------------------ builders

def _model(cfg):
    from .trap_model import load_basis_grids, make_toy_trap
    t = cfg["trap"]
    if t["grid"]:
        return load_basis_grids(t["grid"])
    return make_toy_trap(int(t["n_segments"]), float(t["pitch"]),
                         radial_frequency=float(t["radial_frequency"]))


def _plan(cfg):
    from .trajectory import generate_trajectory
    t = cfg["trajectory"]
    start = (cfg["trap"]["start_segment"] * cfg["trap"]["pitch"], 0.0, 0.0)
    return generate_trajectory(t["distance"], t["duration"], t["dt"], t["profile"], start=start,
                               omega_x=t["omega_x"])


def _spec(cfg, cutoff=None):
    from .filter_chain import default_chain, discretize
    f = cfg["filter"]
    return discretize(default_chain(cutoff or f["cutoff"]), cfg["trajectory"]["dt"], f["method"])


def _synth_config(cfg):
    from .waveform_synth import SynthesisConfig
    s = cfg["synthesis"]
    return SynthesisConfig(slew=s["slew"], voltage_bounds=tuple(s["voltage_bounds"]))


def _truth(cfg):
    from .simulator import GroundTruth
    s = cfg["simulation"]
    return GroundTruth(fidelity=s["fidelity"], decay_rate=s["decay_rate"],
                       precession_time=s["precession_time"], prep_fidelity=s["prep_fidelity"],
                       pi_fidelity=s["pi_fidelity"])


def _report(out: Path, name: str, payload: dict, cfg: dict, fmt: str):
    payload = dict(payload)
    payload["command"] = name
    payload["config"] = cfg
    formats.write_json(payload, out / f"{name}.json", cfg)
    if fmt == "csv":
        with (out / f"{name}.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["key", "value"])
            for k, v in _flatten(payload):
                w.writerow([k, v])


def _flatten(d, prefix=""):
    for k in sorted(d):
        v = d[k]
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            yield from _flatten(v, key + ".")
        elif isinstance(v, (list, tuple, np.ndarray)):
            yield key, json.dumps(np.asarray(v).tolist() if isinstance(v, np.ndarray) else list(v),
                                  default=formats._json_default)
        else:
            yield key, v


def _existing(args, name):
    """Input artifact: explicit flag, else the file in the output directory."""
    p = getattr(args, name, None)
    return Path(p) if p else Path(args.out) / DEFAULT_INPUTS[name]


DEFAULT_INPUTS = {"ramp": "ramp.csv", "lo": "ramsey_lo.csv", "hi": "ramsey_hi.csv",
                  "calibration": "calibration.csv", "tracking": "tracking.csv"}


# ------------------------------------------------------------------ commands

def cmd_trap(args, cfg, out):
    from .trap_model import curvature_target, export_basis_grids, find_minimum
    from .waveform_synth import static_solution
    model = _model(cfg)
    plan = _plan(cfg)
    sc = _synth_config(cfg)
    curv = curvature_target(plan.omega_x, model.mass, model.charge)
    sol, rows = static_solution(model, plan.positions[0], curv, None, sc.row_weights,
                                sc.voltage_bounds, np.zeros(model.n_electrodes), sc.regularization)
    r, p, ok = find_minimum(model, sol.voltages, plan.positions[0])
    if args.export_grid:
        pitch = cfg["trap"]["pitch"]
        n = cfg["trap"]["n_segments"]
        export_basis_grids(model, out / "trap_grid.npz", origin=(-pitch, -40e-6, -40e-6),
                           spacing=(pitch / 40, 10e-6, 10e-6), shape=(40 * (n + 1) + 1, 9, 9))
    omega = np.sqrt(model.charge * p.hessian[0, 0] / model.mass)
    return {"electrodes": model.n_electrodes, "static_voltages": sol.voltages,
            "minimum": r, "converged": bool(ok), "omega_x": float(omega),
            "curvature_target": curv}


def cmd_traj(args, cfg, out):
    plan = _plan(cfg)
    with (out / "trajectory.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "time", "x", "y", "z"])
        for i, (t, r) in enumerate(zip(plan.times, plan.positions)):
            w.writerow([i, repr(float(t)), *(repr(float(v)) for v in r)])
    from .trajectory import peak_speed
    return {"n_steps": plan.n_steps, "duration": plan.duration,
            "peak_speed": peak_speed(plan.distance, plan.duration, plan.profile)}


def cmd_filter(args, cfg, out):
    from .filter_chain import bode, default_chain
    spec = _spec(cfg)
    chain = default_chain(cfg["filter"]["cutoff"])
    f = np.logspace(2, np.log10(0.49 / spec.dt), 400)
    resp = bode(spec, f)
    mag, phase = resp["magnitude"], resp["phase"]
    with (out / "bode.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frequency", "magnitude_db", "phase_deg"])
        for row in zip(f, mag, phase):
            w.writerow([repr(float(v)) for v in row])
    return {"filter": spec.to_dict(), "analog_cutoff": chain.cutoff(), "discrete_cutoff": spec.cutoff(),
            "time_constants": chain.time_constants}


def cmd_synth(args, cfg, out):
    from .plotting import plot_ramp
    from .waveform_synth import synthesize
    model, plan, spec = _model(cfg), _plan(cfg), _spec(cfg)
    t0 = time.perf_counter()
    ramp = synthesize(model, plan, spec, config=_synth_config(cfg))
    ramp.metadata["run_config_hash"] = config_hash(cfg)
    formats.write_ramp(ramp, out / "ramp")
    plot_ramp(ramp, out / "ramp.svg")
    return {"ramp_config_hash": ramp.config_hash(), "seconds": time.perf_counter() - t0,
            "samples": len(ramp.forward.source), "electrodes": ramp.n_electrodes}


def cmd_verify(args, cfg, out):
    from .waveform_synth import DwellPattern, verify_ramp
    ramp = formats.read_ramp(_existing(args, "ramp"))
    model, plan = _model(cfg), _plan(cfg)
    actual = cfg["filter"]["actual_cutoff"]
    diag = verify_ramp(ramp, model, plan,
                       dwell=DwellPattern(cfg["synthesis"]["dwell_precession_time"]),
                       actual_filter=_spec(cfg, actual) if actual else None)
    d = diag.to_dict()
    return {"diagnostics": {k: v for k, v in d.items() if not k.startswith("minima")},
            "ramp_config_hash": ramp.config_hash()}


def cmd_sim(args, cfg, out):
    s = cfg["simulation"]
    seed = cfg["seed"]
    if args.kind == "ramsey":
        from .simulator import simulate_fidelity_experiment
        truth = _truth(cfg)
        lo, hi, record, _ = simulate_fidelity_experiment(
            truth, tuple(s["transports"]), s["phases"], s["repetitions"], seed,
            cfg["detection"]["calibration_trials"], with_counts=False)
        formats.write_ramsey(lo, out / DEFAULT_INPUTS["lo"])
        formats.write_ramsey(hi, out / DEFAULT_INPUTS["hi"])
        formats.write_calibration(record, out / DEFAULT_INPUTS["calibration"])
        return {"amplitudes": [truth.amplitude(m) for m in s["transports"]], "seed": seed}
    if args.kind == "tracking":
        from .simulator import simulate_tracking
        t = s["tracking"]
        M = t["transports"]
        fd = t["dark_total"] / M
        data = simulate_tracking(t["f_s"], t["bright_rate"], fd, M, t["skipped"], t["runs_per_point"],
                                 seed, cfg["analysis"]["dark_prior_sigma"] / M)
        formats.write_tracking(data, out / DEFAULT_INPUTS["tracking"])
        return {"runs": len(data.photons), "seed": seed}
    if args.kind == "motion":
        from .simulator import integrate_motion
        from .waveform_synth import extend_ramp, naive_linear_ramp
        ramp = formats.read_ramp(_existing(args, "ramp"))
        model, plan, spec = _model(cfg), _plan(cfg), _spec(cfg)
        hold = cfg["synthesis"]["hold_steps"]
        hbar_omega = 1.054571817e-34 * plan.omega_x
        result = {}
        for name, r in (("synthesized", ramp),
                        ("naive", naive_linear_ramp(model, plan, spec, _synth_config(cfg)))):
            trace = integrate_motion(extend_ramp(r, spec, hold).forward, model, r.dt,
                                     substeps=s["motion_substeps"])
            result[name] = {"energy": trace.final.energy, "quanta": trace.final.energy / hbar_omega}
        result["ratio"] = result["naive"]["energy"] / result["synthesized"]["energy"]
        return result
    raise ConfigError(f"unknown simulation kind {args.kind}")


def _detection(cfg, record, seed, jobs):
    from .detection_stats import Thresholds, bootstrap_id_grid, calibrate_thresholds, identification
    d = cfg["detection"]
    if d["thresholds"] is not None:
        cal = identification(record.filtered(), Thresholds(*d["thresholds"]))
    else:
        cal = calibrate_thresholds(record.filtered(), objective=d["objective"], target=tuple(d["target"]))
    grid = None
    a = cfg["analysis"]
    if a["bootstrap"]:
        grid = bootstrap_id_grid(record.filtered(), cal.thresholds, resamples=a["resamples"], seed=seed,
                                 bins=a["bins"], jobs=jobs)
    return cal, grid


def cmd_analyze(args, cfg, out):
    from . import plotting
    from .fidelity_analysis import (adjust_for_failures, dephasing_toolbox, DephasingParams,
                                    estimate_fidelity, fit_ramsey, fit_transport_fidelity,
                                    failure_rate_from_line)
    a = cfg["analysis"]
    if args.kind == "fidelity":
        lo = formats.read_ramsey(_existing(args, "lo"))
        hi = formats.read_ramsey(_existing(args, "hi"))
        record = formats.read_calibration(_existing(args, "calibration"))
        cal, grid = _detection(cfg, record, cfg["seed"], args.jobs)
        ident = grid if grid is not None else (cal.p_bb, cal.p_db)
        est = estimate_fidelity(lo, hi, ident, jobs=args.jobs)
        sigma = 0.5 * (est.interval[1] - est.interval[0])
        adj_F, adj_sigma = adjust_for_failures(est.fidelity, a["failed_transports"], lo.transports,
                                               hi.transports, sigma)
        if grid is not None:
            (out / "id_grid.json").write_text(grid.to_json())
        formats.write_curve(est.curve, out / "fidelity_curve.csv", "fidelity")
        formats.write_curve(est.amplitude_lo, out / "amplitude_lo.csv", "amplitude")
        formats.write_curve(est.amplitude_hi, out / "amplitude_hi.csv", "amplitude")
        plotting.plot_curve(est.curve, out / "fidelity_curve.svg", "per-transport fidelity")
        for tag, data in (("lo", lo), ("hi", hi)):
            plotting.plot_fringe(data, fit_ramsey(data, cal.p_bb, cal.p_db), cal.p_bb, cal.p_db,
                                 out / f"fringe_{tag}.svg")
        deph = dephasing_toolbox(DephasingParams(), fidelity=min(est.fidelity, 1.0))
        return {"fidelity": est.to_dict(),
                "detection": {"thresholds": [cal.thresholds.dark, cal.thresholds.bright],
                              "p_bb": cal.p_bb, "p_db": cal.p_db,
                              "discard_fraction": cal.discard_fraction,
                              "bootstrap_cells": 0 if grid is None else len(grid)},
                "failure_adjusted": {"failed_transports": a["failed_transports"], "fidelity": adj_F,
                                     "sigma": adj_sigma},
                "dephasing": deph}
    if args.kind == "tracking":
        data = formats.read_tracking(_existing(args, "tracking"))
        fit = fit_transport_fidelity(data)
        f_lin, f_lin_err = failure_rate_from_line(fit.slope, fit.slope_err, fit.offset, fit.offset_err,
                                                  data.dark_prior_mean, data.dark_prior_sigma,
                                                  data.transports)
        formats.write_curve(fit.curve, out / "tracking_curve.csv", "f_s")
        plotting.plot_tracking(data, fit, out / "tracking.svg")
        return {"f_s": fit.f_s, "interval": list(fit.interval), "transport_fidelity": fit.success,
                "F_b": fit.F_b, "F_d": fit.F_d,
                "linear": {"slope": fit.slope, "slope_err": fit.slope_err, "offset": fit.offset,
                           "offset_err": fit.offset_err, "f_s": f_lin, "f_s_err": f_lin_err}}
    raise ConfigError(f"unknown analysis kind {args.kind}")


def cmd_report(args, cfg, out):
    reports = {}
    for p in sorted(Path(args.out).glob("*.json")):
        if p.name in ("report.json", "ramp.json", "id_grid.json"):
            continue
        try:
            d = json.loads(p.read_text())
        except json.JSONDecodeError:
            continue
        if isinstance(d, dict) and "command" in d:
            reports[p.stem] = {k: v for k, v in d.items() if k != "config"}
    if not reports:
        raise errors.InvalidArgument(f"no command reports found in {args.out}")
    return {"reports": reports}


COMMANDS = {"trap": cmd_trap, "traj": cmd_traj, "filter": cmd_filter, "synth": cmd_synth,
            "verify": cmd_verify, "sim": cmd_sim, "analyze": cmd_analyze, "report": cmd_report}

HELP = {
    "trap": "build the toy trap (or load a basis-grid file) and solve the static potential at the start",
    "traj": "sample the transport trajectory",
    "filter": "discretize the filter chain and tabulate its frequency response",
    "synth": "synthesize the pre-compensated forward and backward voltage ramp",
    "verify": "locate the actual potential minima under a ramp and report deviations",
    "sim": "generate synthetic Ramsey, tracking or motion data",
    "analyze": "estimate per-transport fidelity or transport success from data files",
    "report": "collect the command reports in the output directory",
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON config merged over the defaults")
    common.add_argument("--seed", type=int, default=None, help="random seed (default: config or 0)")
    common.add_argument("--jobs", type=int, default=1, help="parallel workers for bootstrap and grids")
    common.add_argument("--out", metavar="DIR", default=None,
                        help=f"output directory (default: ${OUT_ENV} or ./ionshuttle-out)")
    common.add_argument("--format", choices=("json", "csv"), default="json",
                        help="report format; csv adds a flattened key/value table")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="ionshuttle", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common], help=HELP[name], description=HELP[name])
        if name == "trap":
            p.add_argument("--export-grid", action="store_true", help="also write trap_grid.npz")
        if name in ("verify", "sim"):
            p.add_argument("--ramp", metavar="PATH", help="ramp CSV (default: OUT/ramp.csv)")
        if name == "sim":
            p.add_argument("kind", choices=("ramsey", "tracking", "motion"))
        if name == "analyze":
            p.add_argument("kind", choices=("fidelity", "tracking"))
            p.add_argument("--lo", metavar="PATH", help="Ramsey CSV at the low transport count")
            p.add_argument("--hi", metavar="PATH", help="Ramsey CSV at the high transport count")
            p.add_argument("--calibration", metavar="PATH", help="calibration CSV")
            p.add_argument("--tracking", metavar="PATH", help="tracking CSV")
    return parser


def _publish(tmp: Path, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    for item in tmp.iterdir():
        dest = out / item.name
        if dest.exists():
            dest.unlink()
        shutil.move(str(item), dest)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    args.out = args.out or os.environ.get(OUT_ENV) or "ionshuttle-out"
    out = Path(args.out)
    tmp = None
    try:
        if args.jobs == 0 or args.jobs < -1:
            raise ConfigError("--jobs must be positive or -1")
        cfg = load_config(args.config, args.seed)
        if cfg["seed"] is None:
            cfg["seed"] = 0
        out.mkdir(parents=True, exist_ok=True)
        tmp = Path(tempfile.mkdtemp(prefix=".partial-", dir=out))
        payload = COMMANDS[args.command](args, cfg, tmp)
        name = args.command if args.command not in ("sim", "analyze") else f"{args.command}_{args.kind}"
        _report(tmp, name, payload, cfg, args.format)
        _publish(tmp, out)
        print(out / f"{name}.json")
        return EXIT_OK
    except (errors.InvalidArgument, errors.GridParseError) as exc:
        print(f"ionshuttle: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (errors.OutOfBoundsError, errors.InfeasibleStep, errors.VoltageBoundError,
            errors.SingularInput, errors.InsufficientData, errors.DegenerateLikelihood,
            errors.Unidentifiable, errors.ObjectiveUnreachable, errors.IonEscaped,
            np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"ionshuttle: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    finally:
        if tmp is not None and tmp.exists():
            shutil.rmtree(tmp, ignore_errors=True)


if __name__ == "__main__":
    sys.exit(main())
