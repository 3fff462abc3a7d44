import json
import subprocess
import sys

import numpy as np
import pytest

from ionshuttle import formats
from ionshuttle.cli import main
from ionshuttle.fidelity_analysis import LikelihoodCurve
from ionshuttle.simulator import GroundTruth, simulate_fidelity_experiment, simulate_tracking


def test_ramp_roundtrip_is_bit_exact(ramp, tmp_path):
    formats.write_ramp(ramp, tmp_path / "ramp")
    back = formats.read_ramp(tmp_path / "ramp.csv")
    for a, b in ((ramp.forward, back.forward), (ramp.backward, back.backward)):
        assert np.array_equal(a.source, b.source)
        assert np.array_equal(a.electrode, b.electrode)
        assert np.array_equal(a.ideal, b.ideal)
        assert np.array_equal(a.positions, b.positions)
        assert np.array_equal(a.residuals, b.residuals)
    assert back.dt == ramp.dt and back.slew == ramp.slew
    assert back.config_hash() == ramp.config_hash()


def test_ramp_manifest(ramp, tmp_path):
    formats.write_ramp(ramp, tmp_path / "ramp")
    manifest = json.loads((tmp_path / "ramp.json").read_text())
    assert manifest["electrodes"] == ramp.n_electrodes and manifest["n_steps"] == ramp.n_steps


def test_ramsey_calibration_roundtrip(tmp_path):
    lo, hi, record, _ = simulate_fidelity_experiment(GroundTruth(), seed=2, calibration_trials=300,
                                                     with_counts=False)
    formats.write_ramsey(hi, tmp_path / "hi.csv")
    back = formats.read_ramsey(tmp_path / "hi.csv")
    assert np.array_equal(back.phases, hi.phases) and np.array_equal(back.bright, hi.bright)
    assert back.transports == hi.transports and back.precession_time == hi.precession_time
    formats.write_calibration(record, tmp_path / "cal.csv")
    rec = formats.read_calibration(tmp_path / "cal.csv")
    assert np.array_equal(rec.dark_counts, record.dark_counts)
    assert np.array_equal(rec.bright_counts, record.bright_counts)


def test_tracking_roundtrip(tmp_path):
    data = simulate_tracking(2e-3, 0.12, 0.006, 4000, [0, 100], 10, seed=0, F_d_sigma=1e-4)
    formats.write_tracking(data, tmp_path / "t.csv")
    back = formats.read_tracking(tmp_path / "t.csv")
    assert np.array_equal(back.photons, data.photons)
    assert back.dark_prior_mean == data.dark_prior_mean
    assert back.dark_prior_sigma == data.dark_prior_sigma


def test_curve_roundtrip(tmp_path):
    curve = LikelihoodCurve.gaussian(np.linspace(0, 0.5, 101), 0.3, 0.02)
    formats.write_curve(curve, tmp_path / "c.csv", "amplitude")
    back = formats.read_curve(tmp_path / "c.csv")
    assert np.array_equal(back.grid, curve.grid)
    assert np.allclose(back.density, curve.density, rtol=1e-12)


def test_missing_column_reported(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("phase,bright\n0.0,3\n")
    with pytest.raises(Exception) as info:
        formats.read_ramsey(path)
    assert "trials" in str(info.value)


def _run(tmp_path, *argv):
    return main([*argv, "--out", str(tmp_path)])


def test_sim_is_reproducible(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert _run(a, "sim", "ramsey", "--seed", "7") == 0
    assert _run(b, "sim", "ramsey", "--seed", "7") == 0
    for name in ("ramsey_lo.csv", "ramsey_hi.csv", "calibration.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    assert not any(p.name.startswith(".partial-") for p in a.iterdir())


def test_unknown_config_key(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"trap": {"pitchh": 1.0}}))
    assert _run(tmp_path / "out", "traj", "--config", str(cfg)) == 2


def test_missing_input_is_invalid(tmp_path):
    assert _run(tmp_path, "verify", "--ramp", str(tmp_path / "nope.csv")) == 2


def test_unidentifiable_tracking_is_numerical(tmp_path):
    data = simulate_tracking(2e-3, 0.12, 0.006, 4000, [100], 20, seed=0)
    formats.write_tracking(data, tmp_path / "t.csv")
    assert _run(tmp_path / "out", "analyze", "tracking", "--tracking", str(tmp_path / "t.csv")) == 3


def test_output_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("IONSHUTTLE_OUT", str(tmp_path / "env"))
    assert main(["traj"]) == 0
    assert (tmp_path / "env" / "traj.json").exists()


def test_csv_report(tmp_path):
    assert _run(tmp_path, "filter", "--format", "csv") == 0
    assert (tmp_path / "filter.csv").exists() and (tmp_path / "filter.json").exists()


def test_synth_then_verify(tmp_path):
    assert _run(tmp_path, "synth") == 0
    assert (tmp_path / "ramp.csv").exists() and (tmp_path / "ramp.svg").exists()
    assert _run(tmp_path, "verify") == 0
    report = json.loads((tmp_path / "verify.json").read_text())
    assert report["diagnostics"]["max_position_error"] < 1e-6


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "ionshuttle.cli", "traj", "--out", str(tmp_path)],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr


def test_analyze_fidelity_report(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"analysis": {"bootstrap": False}}))
    out = tmp_path / "out"
    assert _run(out, "sim", "ramsey", "--seed", "3") == 0
    assert _run(out, "analyze", "fidelity", "--config", str(cfg)) == 0
    report = json.loads((out / "analyze_fidelity.json").read_text())
    text = json.dumps(report)
    assert "interval" in text and "fidelity" in text
