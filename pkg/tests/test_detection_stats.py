import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ionshuttle.detection_stats import (IdGrid, PreparedStateRecord, Thresholds, bias_correct,
                                        bootstrap_id_grid, calibrate_thresholds, classify,
                                        identification, identification_matrix, posterior_density,
                                        posterior_normalizer, unfold_counts)
from ionshuttle.errors import InsufficientData, InvalidArgument, ObjectiveUnreachable, SingularInput
from ionshuttle.simulator import NOMINAL_P_BB, NOMINAL_P_DB, CountModel


@pytest.mark.parametrize("count,label", [(0, "dark"), (4, "discard"), (10, "bright"),
                                         (2, "discard"), (6, "discard"), (1, "dark"), (7, "bright")])
def test_classify(count, label):
    assert classify(count, Thresholds(2, 6)) == label


def test_thresholds_order_enforced():
    Thresholds(5, 4)
    with pytest.raises(InvalidArgument):
        Thresholds(6, 4)


def test_negative_counts_rejected():
    with pytest.raises(InvalidArgument):
        PreparedStateRecord(np.array([0, -1]), np.array([5]))


def test_perfectly_separated():
    rec = PreparedStateRecord(np.array([0, 1, 2] * 50), np.array([10, 12, 15] * 50))
    cal = calibrate_thresholds(rec, objective="min_discard", max_error=0.0)
    assert cal.p_bb == 1.0 and cal.p_db == 1.0 and cal.discard_fraction == 0.0


def test_no_discard_window(rng):
    cm = CountModel()
    rec = PreparedStateRecord(cm.draw(rng, False, 2000), cm.draw(rng, True, 2000))
    cal = identification(rec, Thresholds(5, 4))
    assert cal.discard_fraction == 0.0


def test_bright_mass_accounting(rng):
    cm = CountModel()
    rec = PreparedStateRecord(cm.draw(rng, False, 3000), cm.draw(rng, True, 3000))
    th = Thresholds(3, 5)
    cal = identification(rec, th)
    n = len(rec.bright_counts)
    kept = n * (1 - cal.discard_bright)
    bright = np.sum(rec.bright_counts > th.bright)
    assert cal.p_bb * kept == pytest.approx(bright, rel=1e-12)
    assert 0 <= cal.p_bb <= 1 and 0 <= cal.p_db <= 1


def test_scan_reaches_reference_probabilities():
    rng = np.random.default_rng(3)
    cm = CountModel()
    rec = PreparedStateRecord(cm.draw(rng, False, 200_000), cm.draw(rng, True, 200_000))
    cal = calibrate_thresholds(rec, objective="target", target=(NOMINAL_P_BB, NOMINAL_P_DB))
    assert abs(cal.p_bb - NOMINAL_P_BB) < 0.003 and abs(cal.p_db - NOMINAL_P_DB) < 0.003
    exact = cm.identification(cal.thresholds)
    assert exact[0] == pytest.approx(NOMINAL_P_BB, abs=1e-3)


def test_unreachable_objective_carries_frontier():
    rec = PreparedStateRecord(np.array([3, 4, 5] * 20), np.array([3, 4, 5] * 20))
    with pytest.raises(ObjectiveUnreachable) as info:
        calibrate_thresholds(rec, objective="target", target=(0.99, 0.99))
    assert len(info.value.frontier) > 0


def test_empty_histograms():
    with pytest.raises(InsufficientData):
        identification(PreparedStateRecord(np.array([], dtype=int), np.array([3])), Thresholds(2, 3))


def test_veto_filter():
    rec = PreparedStateRecord(np.array([0, 9, 1]), np.array([12, 0, 14]),
                              dark_veto=np.array([False, True, False]),
                              bright_veto=np.array([False, True, False]))
    cal = identification(rec.filtered(), Thresholds(3, 5))
    assert cal.p_bb == 1.0 and cal.p_db == 1.0


def test_posterior_perfect_detection():
    p, d = posterior_density(20, 20, 1.0, 1.0)
    assert p[np.argmax(d)] == 1.0
    p, d = posterior_density(10, 20, 1.0, 1.0)
    assert p[np.argmax(d)] == pytest.approx(0.5)


def test_posterior_no_brights_decreasing():
    p, d = posterior_density(0, 100, NOMINAL_P_BB, NOMINAL_P_DB)
    assert p[np.argmax(d)] == 0.0
    assert np.all(np.diff(d) < 0)


@given(st.integers(0, 200), st.integers(1, 200))
def test_posterior_normalized(b, n):
    b = min(b, n)
    p, d = posterior_density(b, n, NOMINAL_P_BB, NOMINAL_P_DB, grid=4001)
    assert np.trapezoid(d, p) == pytest.approx(1.0, rel=1e-6)


def test_posterior_mode_solves_tag_rate():
    b, n = 30, 100
    p, d = posterior_density(b, n, NOMINAL_P_BB, NOMINAL_P_DB, grid=200001)
    expected = (b / n - (1 - NOMINAL_P_DB)) / (NOMINAL_P_BB + NOMINAL_P_DB - 1)
    assert p[np.argmax(d)] == pytest.approx(expected, abs=1e-5)


def test_posterior_mode_monotone():
    modes = [posterior_density(b, 50, NOMINAL_P_BB, NOMINAL_P_DB)[0][
        np.argmax(posterior_density(b, 50, NOMINAL_P_BB, NOMINAL_P_DB)[1])] for b in range(51)]
    assert np.all(np.diff(modes) >= 0)


def test_closed_form_normalizer():
    from scipy import integrate, stats
    b, n = 37, 90
    num = integrate.quad(lambda x: stats.binom.pmf(b, n, x * NOMINAL_P_BB + (1 - x) * (1 - NOMINAL_P_DB)),
                         0, 1, epsabs=1e-14)[0]
    assert posterior_normalizer(b, n, NOMINAL_P_BB, NOMINAL_P_DB) == pytest.approx(num, rel=1e-9)


def test_posterior_rejects_bad_count():
    with pytest.raises(InvalidArgument):
        posterior_density(11, 10, 0.9, 0.9)


def _calibration_record(seed, n=10000):
    rng = np.random.default_rng(seed)
    cm = CountModel()
    return PreparedStateRecord(cm.draw(rng, False, n), cm.draw(rng, True, n))


def test_bootstrap_grid_shape_and_weights():
    rec = _calibration_record(5)
    grid = bootstrap_id_grid(rec, Thresholds(3, 5), resamples=2000, seed=1)
    assert len(grid) == 100
    assert abs(grid.weight.sum() - 1) <= 1e-12
    assert np.all(np.abs(grid.weight * 100 - 1) <= 0.2)
    assert np.all(np.diff(np.unique(grid.p_bb)) > 0)


def test_bootstrap_spread_matches_binomial():
    rec = _calibration_record(6)
    th = Thresholds(3, 5)
    cal = identification(rec, th)
    grid = bootstrap_id_grid(rec, th, resamples=4000, seed=2)
    mean = np.sum(grid.weight * grid.p_bb)
    std = np.sqrt(np.sum(grid.weight * (grid.p_bb - mean) ** 2))
    kept = len(rec.bright_counts) * (1 - cal.discard_bright)
    se = np.sqrt(cal.p_bb * (1 - cal.p_bb) / kept)
    # binning into ten means shrinks the spread a little
    assert abs(std / se - 1) < 0.2


def test_bootstrap_independent_of_jobs():
    rec = _calibration_record(7, 2000)
    a = bootstrap_id_grid(rec, Thresholds(3, 5), resamples=3000, seed=4, jobs=1)
    b = bootstrap_id_grid(rec, Thresholds(3, 5), resamples=3000, seed=4, jobs=2)
    assert np.array_equal(a.p_bb, b.p_bb) and np.array_equal(a.weight, b.weight)


def test_zero_variance_record_collapses():
    rec = PreparedStateRecord(np.zeros(500, dtype=int), np.full(500, 12))
    grid = bootstrap_id_grid(rec, Thresholds(3, 5), resamples=500, seed=0)
    assert len(grid) == 1 and grid.weight[0] == pytest.approx(1.0)
    assert grid.p_bb[0] == 1.0 and grid.p_db[0] == 1.0


def test_bootstrap_needs_resamples():
    with pytest.raises(InvalidArgument):
        bootstrap_id_grid(_calibration_record(0, 100), Thresholds(3, 5), resamples=50)


def test_id_grid_json_roundtrip():
    grid = bootstrap_id_grid(_calibration_record(8, 1000), Thresholds(3, 5), resamples=500, seed=3)
    back = IdGrid.from_json(grid.to_json())
    assert np.array_equal(back.p_bb, grid.p_bb) and np.array_equal(back.weight, grid.weight)


def test_bias_identity():
    assert bias_correct(NOMINAL_P_BB, NOMINAL_P_DB, 1.0, 1.0) == pytest.approx((NOMINAL_P_BB, NOMINAL_P_DB),
                                                                            abs=1e-15)


def test_bias_magnitudes():
    bb, db = bias_correct(NOMINAL_P_BB, NOMINAL_P_DB, 1 - 1e-4, 1 - 1.3e-4)
    # bias = measured - unbiased; imperfect preparation lowers what is measured
    assert NOMINAL_P_BB - bb == pytest.approx(-2.18e-4, rel=0.02)
    assert NOMINAL_P_DB - db == pytest.approx(-9.49e-5, rel=0.02)


def test_bias_first_order():
    shifts = []
    for eps in (1e-3, 1e-4, 1e-5):
        bb, db = bias_correct(NOMINAL_P_BB, NOMINAL_P_DB, 1 - eps, 1 - eps)
        shifts.append(np.hypot(bb - NOMINAL_P_BB, db - NOMINAL_P_DB))
    assert shifts[0] / shifts[1] == pytest.approx(10, rel=0.01)
    assert shifts[1] / shifts[2] == pytest.approx(10, rel=0.01)


def test_bias_singular_and_invalid():
    with pytest.raises(SingularInput):
        bias_correct(0.9, 0.9, 0.5, 1.0)
    with pytest.raises(InvalidArgument):
        bias_correct(0.9, 0.9, 0.4, 1.0)
    with pytest.raises(InvalidArgument):
        bias_correct(0.9, 0.9, 0.99, 0.0)


def test_unfold_identity():
    assert unfold_counts(30, 70, 1.0, 1.0) == (30.0, 70.0)


def test_unfold_example():
    b, d = unfold_counts(50, 50, NOMINAL_P_BB, NOMINAL_P_DB)
    # b = (p_db * 50 - (1 - p_db) * 50) / (p_bb + p_db - 1)
    assert b == pytest.approx(51.106, abs=1e-3)
    assert b + d == pytest.approx(100.0, abs=1e-12)


@given(st.floats(0, 1000), st.floats(0, 1000), st.floats(0.6, 1.0), st.floats(0.6, 1.0))
def test_unfold_roundtrip(b, d, p_bb, p_db):
    tagged = identification_matrix(p_bb, p_db) @ np.array([b, d])
    ub, ud = unfold_counts(tagged[0], tagged[1], p_bb, p_db)
    assert ub == pytest.approx(b, abs=1e-9 * (1 + b + d))
    assert ud == pytest.approx(d, abs=1e-9 * (1 + b + d))
    assert ub + ud == pytest.approx(tagged.sum(), rel=1e-12)


def test_unfold_singular():
    with pytest.raises(SingularInput):
        unfold_counts(1, 1, 0.5, 0.5)
