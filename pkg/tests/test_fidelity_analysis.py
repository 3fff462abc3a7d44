import numpy as np
import pytest
from scipy import optimize

from ionshuttle.detection_stats import IdGrid
from ionshuttle.errors import DegenerateLikelihood, InsufficientData, InvalidArgument, Unidentifiable
from ionshuttle.fidelity_analysis import (DephasingParams, LikelihoodCurve, RamseyDataset,
                                          TrackingDataset, adjust_for_failures, average_likelihood,
                                          cell_amplitudes, dephasing_toolbox, fidelity_likelihood,
                                          fit_ramsey, fit_transport_fidelity, linear_tracking_fit,
                                          phase_sigma_from_fidelity, profile_likelihood_A,
                                          ramsey_log_likelihood, tracking_mean)
from ionshuttle.simulator import NOMINAL_P_BB, NOMINAL_P_DB, GroundTruth, simulate_ramsey, simulate_tracking

PHASES = np.linspace(0, 2 * np.pi, 19, endpoint=False)


def _exact_data(A, B, phi, n, transports=2):
    p = B + A * np.sin(PHASES - phi)
    trials = np.full(len(PHASES), n)
    return RamseyDataset(PHASES, np.round(p * n).astype(np.int64), trials, transports)


@pytest.fixture(scope="module")
def scan():
    data, _, _ = simulate_ramsey(GroundTruth(), 4000, seed=21, calibration_trials=0, with_counts=False)
    return data


def test_dataset_validation():
    with pytest.raises(InvalidArgument):
        RamseyDataset(np.array([0.0, 0.0, 2 * np.pi]), np.array([1, 1, 1]), np.array([2, 2, 2]), 2)
    with pytest.raises(InvalidArgument):
        RamseyDataset(PHASES[:3], np.array([1, 5, 1]), np.array([2, 2, 2]), 2)


def test_noiseless_recovery():
    fit = fit_ramsey(_exact_data(0.49, 0.5, 0.0, 10 ** 9), 1.0, 1.0)
    assert fit.amplitude == pytest.approx(0.49, abs=1e-6)
    assert fit.offset == pytest.approx(0.5, abs=1e-6)
    assert fit.phase == pytest.approx(0.0, abs=1e-6)


def test_all_discarded_rejected():
    data = RamseyDataset(PHASES, np.zeros(19, dtype=int), np.zeros(19, dtype=int), 2)
    with pytest.raises(InsufficientData):
        fit_ramsey(data, 0.9, 0.9)


def test_zero_amplitude_reduces_to_pooled_rate(scan):
    res = optimize.minimize_scalar(
        lambda b: -float(ramsey_log_likelihood(scan, 0.0, b, 0.0, NOMINAL_P_BB, NOMINAL_P_DB)),
        bounds=(0, 1), method="bounded", options={"xatol": 1e-12})
    rate = scan.bright.sum() / scan.trials.sum()
    expected = (rate - (1 - NOMINAL_P_DB)) / (NOMINAL_P_BB + NOMINAL_P_DB - 1)
    assert res.x == pytest.approx(expected, abs=1e-7)


def test_fit_beats_random_feasible_points(scan):
    fit = fit_ramsey(scan, NOMINAL_P_BB, NOMINAL_P_DB)
    rng = np.random.default_rng(0)
    a = rng.uniform(0, 0.5, 1000)
    b = a + (1 - 2 * a) * rng.uniform(0, 1, 1000)
    ph = rng.uniform(-np.pi, np.pi, 1000)
    ll = ramsey_log_likelihood(scan, a, b, ph, NOMINAL_P_BB, NOMINAL_P_DB)
    assert fit.log_likelihood >= ll.max()


def test_profile_peak_matches_fit(scan):
    fit = fit_ramsey(scan, NOMINAL_P_BB, NOMINAL_P_DB)
    curve = profile_likelihood_A(scan, NOMINAL_P_BB, NOMINAL_P_DB)
    assert curve.mode == pytest.approx(fit.amplitude, abs=2e-5)
    assert curve.log_values.max() <= fit.log_likelihood + 1e-8
    half = curve.width / 2
    assert 0.003 <= half <= 0.012


def test_more_trials_narrow_the_curve(scan):
    one = profile_likelihood_A(scan, NOMINAL_P_BB, NOMINAL_P_DB)
    two = profile_likelihood_A(scan.scaled(2), NOMINAL_P_BB, NOMINAL_P_DB)
    assert one.width / two.width == pytest.approx(np.sqrt(2), rel=0.1)


def test_single_cell_grid_equals_profile(scan):
    grid = IdGrid.single(NOMINAL_P_BB, NOMINAL_P_DB)
    avg = average_likelihood(scan, grid)
    prof = profile_likelihood_A(scan, NOMINAL_P_BB, NOMINAL_P_DB)
    assert np.allclose(avg.density, prof.density, rtol=1e-9, atol=1e-12)
    assert avg.mode == pytest.approx(prof.mode, abs=1e-12)


def test_lower_identification_raises_amplitude(scan):
    grid = IdGrid(np.array([0.95, 0.964, 0.975]), np.array([0.975, 0.985, 0.99]),
                  np.full(3, 1 / 3), 0, 0, 1)
    amps = cell_amplitudes(scan, grid)
    assert np.all(np.diff(amps) < 0)


def test_identical_curves_give_unit_fidelity():
    grid = np.linspace(0, 0.5, 2001)
    c = LikelihoodCurve.gaussian(grid, 0.49, 0.001)
    assert fidelity_likelihood(c, c, 2, 4000).mode == pytest.approx(1.0, abs=2e-7)


def test_fidelity_invariant_under_rescaling():
    grid = np.linspace(0, 0.5, 2001)
    lo, hi = LikelihoodCurve.gaussian(grid, 0.49, 0.005), LikelihoodCurve.gaussian(grid, 0.477, 0.005)
    k = 0.7
    lo2 = LikelihoodCurve.gaussian(grid * k, 0.49 * k, 0.005 * k)
    hi2 = LikelihoodCurve.gaussian(grid * k, 0.477 * k, 0.005 * k)
    a = fidelity_likelihood(lo, hi, 2, 4000)
    b = fidelity_likelihood(lo2, hi2, 2, 4000)
    assert b.mode == pytest.approx(a.mode, abs=1e-9)
    assert np.allclose(b.interval, a.interval, atol=1e-9)


def test_non_overlapping_curves():
    # the amplitude ratio needs F far above the searched range
    lo = LikelihoodCurve.gaussian(np.linspace(0, 2e-5, 201), 1e-5, 1e-7)
    hi = LikelihoodCurve.gaussian(np.linspace(0.44, 0.46, 201), 0.45, 1e-4)
    with pytest.raises(DegenerateLikelihood):
        fidelity_likelihood(lo, hi, 2, 4000)


def test_transport_counts_ordered():
    grid = np.linspace(0, 0.5, 101)
    c = LikelihoodCurve.gaussian(grid, 0.4, 0.01)
    with pytest.raises(InvalidArgument):
        fidelity_likelihood(c, c, 10, 10)


def test_failure_adjustment():
    assert adjust_for_failures(0.99999, 0, 2, 4000, 1e-6) == pytest.approx((0.99999, 1e-6))
    values = [adjust_for_failures(0.999994, m, 2, 4000, 6.5e-6)[0] for m in range(0, 400, 20)]
    assert np.all(np.diff(values) < 0)
    with pytest.raises(InvalidArgument):
        adjust_for_failures(0.999994, 3998, 2, 4000, 1e-6)


def test_tracking_mean_without_failures():
    ms = np.array([0, 100, 200])
    m = tracking_mean(ms, 4000, 0.0, 0.03, 0.005)
    assert np.allclose(np.diff(m), 100 * (0.03 - 0.005))
    assert m[0] == pytest.approx(4000 * 0.005)


def test_tracking_without_failures_recovers_line():
    M, fb, fd = 4000, 0.035, 23.5 / 4000
    data = simulate_tracking(0.0, fb, fd, M, [0, 100, 200, 300], 2000, seed=4, F_d_sigma=0.3 / M)
    slope, slope_err, offset, offset_err = linear_tracking_fit(data)
    assert abs(slope - (fb - fd)) < 4 * slope_err
    assert abs(offset - M * fd) < 4 * offset_err
    fit = fit_transport_fidelity(data)
    assert fit.interval[0] == 0.0


def test_flat_tracking_is_consistent():
    # F_b = F_d: the photon total does not depend on the skip count
    data = simulate_tracking(0.0, 0.01, 0.01, 4000, [0, 100, 200], 500, seed=9)
    slope, slope_err, *_ = linear_tracking_fit(data)
    assert abs(slope) < 4 * slope_err


def test_tracking_needs_distinct_levels():
    data = TrackingDataset(np.zeros(10, dtype=int), np.full(10, 23), 4000, 23.5, 0.3)
    with pytest.raises(Unidentifiable):
        fit_transport_fidelity(data)


def test_phase_spread_from_fidelity():
    assert float(phase_sigma_from_fidelity(1.0)) == 0.0
    assert float(phase_sigma_from_fidelity(0.999994)) == pytest.approx(3.464e-3, rel=1e-3)
    for bad in (1.0001, 0.0):
        with pytest.raises(InvalidArgument):
            phase_sigma_from_fidelity(bad)


def test_toolbox_products():
    out = dephasing_toolbox(DephasingParams(dB_dx=10.0e-3), fidelity=0.999994)
    assert out["dnu_dx"] == pytest.approx(397e3)
    assert out["transition_shift"] == pytest.approx(111.16, rel=1e-4)
    assert out["static_amplitude"] == pytest.approx(0.490, abs=1e-3)
    assert dephasing_toolbox(DephasingParams())["dnu_dx"] == pytest.approx(420.82e3, rel=1e-4)
    with pytest.raises(InvalidArgument):
        DephasingParams(decay_rate=-1.0)
