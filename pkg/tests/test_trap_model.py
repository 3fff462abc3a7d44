import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ionshuttle.errors import GridParseError, InvalidArgument, OutOfBoundsError
from ionshuttle.trap_model import (ELEMENTARY_CHARGE, YB171_MASS, GaussianBasis, TrapModel,
                                   curvature_target, export_basis_grids, find_minimum,
                                   load_basis_grids, make_toy_trap)

PITCH = 280e-6


def test_segment_centers_follow_pitch():
    model = make_toy_trap(7, PITCH)
    centers = [b.center for b in model.bases if isinstance(b, GaussianBasis)]
    assert np.allclose(np.diff(centers), PITCH, rtol=0, atol=1e-15)


def test_symmetric_neighbours_put_minimum_on_grounded_segment(toy_model):
    j = 4
    u = np.zeros(toy_model.n_electrodes)
    u[j - 1] = u[j + 1] = 1.0
    p = toy_model.probe(u, (j * PITCH, 0, 0))
    assert abs(p.gradient[0]) < 1e-9
    r, _, ok = find_minimum(toy_model, u, (j * PITCH + 20e-6, 0, 0))
    assert ok and abs(r[0] - j * PITCH) < 1e-12


def test_single_basis_peak():
    b = GaussianBasis(0, 3 * PITCH, 0.8 * PITCH, 1.0, 0.5, 1.0)
    val, grad, _ = b.evaluate(np.array([[3 * PITCH, 0.0, 0.0]]))
    assert val[0] == pytest.approx(1.0)
    assert grad[0, 0] == 0.0


def test_zero_voltages_give_pseudopotential_only(toy_model):
    r = np.array([1.3 * PITCH, 3e-6, -2e-6])
    p = toy_model.probe(np.zeros(toy_model.n_electrodes), r)
    v, g, h = toy_model.fixed_response(r)
    assert p.value == pytest.approx(v[0])
    assert np.allclose(p.gradient, g[0]) and np.allclose(p.hessian, h[0])


def test_doubling_voltages_doubles_dc_part(toy_model, rng):
    r = np.array([2.7 * PITCH, 1e-6, 2e-6])
    u = rng.normal(size=toy_model.n_electrodes)
    zero = toy_model.probe(np.zeros_like(u), r)
    one = toy_model.probe(u, r)
    two = toy_model.probe(2 * u, r)
    assert np.allclose(two.gradient - zero.gradient, 2 * (one.gradient - zero.gradient), rtol=1e-12)
    assert two.value - zero.value == pytest.approx(2 * (one.value - zero.value), rel=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=11, max_size=11),
       st.lists(st.floats(-5, 5), min_size=11, max_size=11),
       st.floats(0, 9 * PITCH), st.floats(-10e-6, 10e-6), st.floats(-10e-6, 10e-6))
def test_dc_part_is_linear(u, v, x, y, z):
    model = make_toy_trap()
    u, v = np.array(u), np.array(v)
    r = (x, y, z)
    base = model.probe(np.zeros(11), r)
    pu, pv, puv = model.probe(u, r), model.probe(v, r), model.probe(u + v, r)
    lhs = puv.hessian - base.hessian
    rhs = (pu.hessian - base.hessian) + (pv.hessian - base.hessian)
    scale = max(np.abs(lhs).max(), np.abs(rhs).max(), 1.0)
    assert np.abs(lhs - rhs).max() <= 1e-12 * scale


def test_gradient_matches_finite_differences(toy_model, rng):
    u = rng.normal(size=toy_model.n_electrodes)
    r = np.array([3.4 * PITCH, 4e-6, -3e-6])
    h = 1e-8
    p = toy_model.probe(u, r)
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        fd = (toy_model.probe(u, r + e).value - toy_model.probe(u, r - e).value) / (2 * h)
        assert fd == pytest.approx(p.gradient[k], rel=1e-6, abs=1e-6 * np.abs(p.gradient).max())


def test_nan_voltage_rejected(toy_model):
    u = np.zeros(toy_model.n_electrodes)
    u[2] = np.nan
    with pytest.raises(InvalidArgument):
        toy_model.probe(u, (0, 0, 0))


def test_wrong_voltage_count_rejected(toy_model):
    with pytest.raises(InvalidArgument):
        toy_model.probe(np.zeros(3), (0, 0, 0))


def test_bad_geometry_rejected():
    with pytest.raises(InvalidArgument):
        make_toy_trap(pitch=-1.0)
    with pytest.raises(InvalidArgument):
        make_toy_trap(width=0.0)
    with pytest.raises(InvalidArgument):
        make_toy_trap(n_segments=3)


def test_curvature_target_for_ytterbium():
    k = curvature_target(2 * np.pi * 230e3, YB171_MASS, ELEMENTARY_CHARGE)
    assert k == pytest.approx(3.70e6, rel=2e-3)


@pytest.fixture(scope="module")
def grid_file(tmp_path_factory):
    model = make_toy_trap(7, PITCH)
    path = tmp_path_factory.mktemp("grid") / "trap.npz"
    export_basis_grids(model, path, origin=(0.0, -20e-6, -20e-6), spacing=(PITCH / 20, 5e-6, 5e-6),
                       shape=(121, 9, 9))
    return model, path


def test_grid_roundtrip_matches_at_nodes(grid_file, rng):
    model, path = grid_file
    loaded = load_basis_grids(path)
    assert loaded.n_electrodes == model.n_electrodes
    u = rng.normal(size=model.n_electrodes)
    for node in ((10, 4, 4), (60, 2, 7), (100, 8, 0)):
        r = np.array([node[0] * PITCH / 20, -20e-6 + node[1] * 5e-6, -20e-6 + node[2] * 5e-6])
        assert loaded.probe(u, r).value == pytest.approx(model.probe(u, r).value, rel=1e-12, abs=1e-15)


def test_grid_outside_bounds(grid_file):
    _, path = grid_file
    loaded = load_basis_grids(path)
    with pytest.raises(OutOfBoundsError):
        loaded.probe(np.zeros(loaded.n_electrodes), (-1e-3, 0, 0))


def test_grid_electrode_count_preserved(tmp_path):
    model = make_toy_trap(12, PITCH)
    path = tmp_path / "t.npz"
    export_basis_grids(model, path, (0.0, -10e-6, -10e-6), (PITCH / 4, 5e-6, 5e-6), (49, 5, 5))
    assert load_basis_grids(path).n_electrodes == 13


def _rewrite(src, dst, drop=None, replace=None):
    with np.load(src) as z:
        arrays = {k: z[k] for k in z.files if k != drop}
    arrays.update(replace or {})
    np.savez(dst, **arrays)


def test_missing_pseudopotential_reported(grid_file, tmp_path):
    _, path = grid_file
    bad = tmp_path / "bad.npz"
    _rewrite(path, bad, drop="pseudopotential")
    with pytest.raises(GridParseError, match="pseudopotential record absent"):
        load_basis_grids(bad)


def test_malformed_header_reported(grid_file, tmp_path):
    _, path = grid_file
    bad = tmp_path / "bad.npz"
    _rewrite(path, bad, replace={"header": np.frombuffer(b"{not json", dtype=np.uint8)})
    with pytest.raises(GridParseError, match="header"):
        load_basis_grids(bad)


def test_nonfinite_field_reported(grid_file, tmp_path):
    _, path = grid_file
    with np.load(path) as z:
        field = z["electrode_002"].copy()
    field[3, 3, 3] = np.inf
    bad = tmp_path / "bad.npz"
    _rewrite(path, bad, replace={"electrode_002": field})
    with pytest.raises(GridParseError, match="electrode_002"):
        load_basis_grids(bad)


def test_header_is_json(grid_file):
    _, path = grid_file
    with np.load(path) as z:
        header = json.loads(z["header"].tobytes().decode())
    assert header["electrode_count"] == 8 and header["format"] == "ionshuttle-basis-grid"


def test_too_few_bases_rejected(toy_model):
    with pytest.raises(InvalidArgument):
        TrapModel(toy_model.bases[:4], toy_model.pseudopotential)
