"""Plain-text interchange: CSV tables with JSON manifests.

Floats are written with ``repr`` so that every value round-trips bit-exactly.
"""
from __future__ import annotations

import csv
import json
import logging
from pathlib import Path

import numpy as np

from .detection_stats import PreparedStateRecord
from .errors import GridParseError, InvalidArgument
from .fidelity_analysis import LikelihoodCurve, RamseyDataset, TrackingDataset
from .waveform_synth import RampLeg, VoltageRamp, config_hash

logger = logging.getLogger(__name__)

RAMP_FORMAT = "ionshuttle-ramp"
FORMAT_VERSION = 1


def _fmt(x) -> str:
    return repr(float(x))


def _read_rows(path):
    path = Path(path)
    if not path.exists():
        raise InvalidArgument(f"no such file: {path}")
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        rows = list(reader)
        return reader.fieldnames or [], rows


def _need(fields, names, path):
    missing = [n for n in names if n not in fields]
    if missing:
        raise GridParseError(f"{path}: missing columns {missing}")


# -------------------------------------------------------------------- ramps

def _leg_columns(E):
    return (["leg", "step", "time", "x", "y", "z"]
            + [f"source_{j}" for j in range(E)] + [f"electrode_{j}" for j in range(E)]
            + [f"ideal_{j}" for j in range(E)] + [f"residual_{k}" for k in range(6)])


def write_ramp(ramp: VoltageRamp, path) -> Path:
    """Write ``<path>.csv`` and ``<path>.json``; returns the CSV path."""
    path = Path(path)
    csv_path, manifest_path = path.with_suffix(".csv"), path.with_suffix(".json")
    E = ramp.n_electrodes
    with csv_path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(_leg_columns(E))
        for name, leg in (("forward", ramp.forward), ("backward", ramp.backward)):
            for i in range(len(leg.source)):
                w.writerow([name, i, _fmt(i * ramp.dt)] + [_fmt(v) for v in leg.positions[i]]
                           + [_fmt(v) for v in leg.source[i]] + [_fmt(v) for v in leg.electrode[i]]
                           + [_fmt(v) for v in leg.ideal[i]] + [_fmt(v) for v in leg.residuals[i]])
    manifest = {"format": RAMP_FORMAT, "version": FORMAT_VERSION, "electrodes": E,
                "dt": ramp.dt, "slew": ramp.slew, "n_steps": ramp.n_steps,
                "config_hash": ramp.config_hash(), "metadata": ramp.metadata,
                "table": csv_path.name}
    manifest_path.write_text(json.dumps(manifest, indent=1, sort_keys=True, default=_json_default))
    return csv_path


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"not serializable: {type(o).__name__}")


def read_ramp(path) -> VoltageRamp:
    path = Path(path)
    manifest_path = path.with_suffix(".json")
    try:
        manifest = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise GridParseError(f"unreadable ramp manifest {manifest_path}: {exc}") from exc
    if manifest.get("format") != RAMP_FORMAT:
        raise GridParseError(f"{manifest_path}: not a ramp manifest")
    E = int(manifest["electrodes"])
    fields, rows = _read_rows(path.with_suffix(".csv"))
    _need(fields, _leg_columns(E), path)
    legs = {}
    for name in ("forward", "backward"):
        sel = [r for r in rows if r["leg"] == name]
        if not sel:
            raise GridParseError(f"{path}: no rows for the {name} leg")

        def block(prefix, n):
            return np.array([[float(r[f"{prefix}_{j}"]) for j in range(n)] for r in sel])
        pos = np.array([[float(r[c]) for c in ("x", "y", "z")] for r in sel])
        legs[name] = RampLeg(block("source", E), block("electrode", E), block("ideal", E), pos,
                             block("residual", 6))
    return VoltageRamp(legs["forward"], legs["backward"], float(manifest["dt"]), float(manifest["slew"]),
                       int(manifest["n_steps"]), manifest.get("metadata", {}))


# ------------------------------------------------------------------ Ramsey

RAMSEY_COLUMNS = ["phase", "bright", "trials", "transports", "precession_time"]


def write_ramsey(data: RamseyDataset, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RAMSEY_COLUMNS)
        for ph, b, n in zip(data.phases, data.bright, data.trials):
            w.writerow([_fmt(ph), int(b), int(n), int(data.transports), _fmt(data.precession_time)])
    return path


def read_ramsey(path) -> RamseyDataset:
    fields, rows = _read_rows(path)
    _need(fields, RAMSEY_COLUMNS, path)
    if not rows:
        raise GridParseError(f"{path}: no data rows")
    m = {int(r["transports"]) for r in rows}
    if len(m) != 1:
        raise GridParseError(f"{path}: mixed transport counts {sorted(m)}")
    return RamseyDataset(np.array([float(r["phase"]) for r in rows]),
                         np.array([int(r["bright"]) for r in rows]),
                         np.array([int(r["trials"]) for r in rows]),
                         m.pop(), float(rows[0]["precession_time"]))


# ---------------------------------------------------------------- tracking

TRACKING_COLUMNS = ["skipped", "photons", "transports", "dark_prior_mean", "dark_prior_sigma"]


def write_tracking(data: TrackingDataset, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACKING_COLUMNS)
        for ms, ph in zip(data.skipped, data.photons):
            w.writerow([int(ms), int(ph), int(data.transports), _fmt(data.dark_prior_mean),
                        _fmt(data.dark_prior_sigma)])
    return path


def read_tracking(path) -> TrackingDataset:
    fields, rows = _read_rows(path)
    _need(fields, TRACKING_COLUMNS, path)
    if not rows:
        raise GridParseError(f"{path}: no data rows")
    r0 = rows[0]
    return TrackingDataset(np.array([int(r["skipped"]) for r in rows]),
                           np.array([int(r["photons"]) for r in rows]),
                           int(r0["transports"]), float(r0["dark_prior_mean"]),
                           float(r0["dark_prior_sigma"]))


# ------------------------------------------------------------- calibration

CALIBRATION_COLUMNS = ["trial", "prepared", "transports", "counts", "veto"]


def write_calibration(record: PreparedStateRecord, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CALIBRATION_COLUMNS)
        trial = 0
        for label, counts, veto in (("dark", record.dark_counts, record.dark_veto),
                                    ("bright", record.bright_counts, record.bright_veto)):
            veto = np.zeros(len(counts), dtype=bool) if veto is None else np.asarray(veto, dtype=bool)
            for c, v in zip(counts, veto):
                w.writerow([trial, label, int(record.transports), int(c), int(v)])
                trial += 1
    return path


def read_calibration(path) -> PreparedStateRecord:
    fields, rows = _read_rows(path)
    _need(fields, CALIBRATION_COLUMNS, path)
    out = {}
    for label in ("dark", "bright"):
        sel = [r for r in rows if r["prepared"] == label]
        out[label] = (np.array([int(r["counts"]) for r in sel], dtype=np.int64),
                      np.array([bool(int(r["veto"])) for r in sel]))
    if not len(out["dark"][0]) or not len(out["bright"][0]):
        raise GridParseError(f"{path}: both prepared states need at least one trial")
    transports = int(rows[0]["transports"])
    dv = out["dark"][1] if out["dark"][1].any() else None
    bv = out["bright"][1] if out["bright"][1].any() else None
    return PreparedStateRecord(out["dark"][0], out["bright"][0], transports, dv, bv)


# ------------------------------------------------------------------ curves

def write_curve(curve: LikelihoodCurve, path, name: str = "parameter") -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([name, "log_likelihood", "density"])
        for x, lv, d in zip(curve.grid, curve.log_values, curve.density):
            w.writerow([_fmt(x), _fmt(lv), _fmt(d)])
    return path


def read_curve(path) -> LikelihoodCurve:
    fields, rows = _read_rows(path)
    if len(fields) < 2:
        raise GridParseError(f"{path}: expected parameter and log_likelihood columns")
    return LikelihoodCurve.from_log([float(r[fields[0]]) for r in rows],
                                    [float(r["log_likelihood"]) for r in rows])


def write_json(obj, path, config: dict | None = None) -> Path:
    """JSON report; carries the hash of ``config`` when given."""
    path = Path(path)
    payload = dict(obj)
    if config is not None:
        payload["config_hash"] = config_hash(config)
    path.write_text(json.dumps(payload, indent=1, sort_keys=True, default=_json_default))
    return path
