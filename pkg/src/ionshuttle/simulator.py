"""Synthetic measurement records with known ground truth, and classical ion
motion under a voltage ramp."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .detection_stats import (DetectionCalibration, PreparedStateRecord, Thresholds,
                              classify_counts)
from .errors import IonEscaped, InvalidArgument, OutOfBoundsError
from .fidelity_analysis import RamseyDataset, TrackingDataset, tracking_mean
from .trap_model import TrapModel, find_minimum
from .waveform_synth import RampLeg

logger = logging.getLogger(__name__)

NOMINAL_P_BB = 0.964
NOMINAL_P_DB = 0.985


# ---------------------------------------------------------------- photon counts

@dataclass(frozen=True)
class CountModel:
    """Photon-count distributions of the two states.

    Dark: Poisson(dark_mean), except that a fraction ``dark_leakage`` of dark
    trials is pumped bright during detection and drawn from
    Poisson(dark_leak_mean).  Bright: Poisson(bright_mean), except that a
    fraction ``bright_leakage`` decays early and is drawn from
    Poisson(bright_leak_mean).  The defaults give p_bb = 0.964 and
    p_db = 0.985 with thresholds (3, 5).
    """

    dark_mean: float = 1.0
    bright_mean: float = 12.0
    dark_leakage: float = 0.023662068544080952
    dark_leak_mean: float = 6.0
    bright_leakage: float = 0.042690521598401004
    bright_leak_mean: float = 1.5

    def __post_init__(self):
        for name in ("dark_leakage", "bright_leakage"):
            if not 0 <= getattr(self, name) <= 1:
                raise InvalidArgument(f"{name} must lie in [0, 1]")
        for name in ("dark_mean", "bright_mean", "dark_leak_mean", "bright_leak_mean"):
            if not getattr(self, name) >= 0:
                raise InvalidArgument(f"{name} must be nonnegative")

    def pmf(self, counts, bright: bool):
        from scipy.stats import poisson
        counts = np.asarray(counts)
        if not bright:
            return ((1 - self.dark_leakage) * poisson.pmf(counts, self.dark_mean)
                    + self.dark_leakage * poisson.pmf(counts, self.dark_leak_mean))
        return ((1 - self.bright_leakage) * poisson.pmf(counts, self.bright_mean)
                + self.bright_leakage * poisson.pmf(counts, self.bright_leak_mean))

    def draw(self, rng, bright, size=None):
        bright = np.asarray(bright, dtype=bool)
        shape = bright.shape if size is None else size
        leak_roll = rng.random(shape)
        lam = np.where(bright,
                       np.where(leak_roll < self.bright_leakage, self.bright_leak_mean, self.bright_mean),
                       np.where(leak_roll < self.dark_leakage, self.dark_leak_mean, self.dark_mean))
        return rng.poisson(lam)

    def identification(self, thresholds: Thresholds):
        """(p_bb, p_db, discard_bright, discard_dark) implied by the shapes."""
        n = np.arange(0, _count_span(self))
        pb, pd = self.pmf(n, True), self.pmf(n, False)
        dark = n < thresholds.dark
        bright = n > thresholds.bright
        keep_b = pb[dark | bright].sum()
        keep_d = pd[dark | bright].sum()
        return (pb[bright].sum() / keep_b, pd[dark].sum() / keep_d, 1 - keep_b, 1 - keep_d)


def _count_span(cm: CountModel) -> int:
    return int(10 * max(cm.bright_mean, cm.dark_mean, cm.dark_leak_mean, cm.bright_leak_mean) + 50)


def _truncated_draw(rng, weights, size):
    cdf = np.cumsum(weights)
    cdf /= cdf[-1]
    return np.searchsorted(cdf, rng.random(size), side="right")


def draw_counts_for_tags(rng, tags, count_model: CountModel, thresholds: Thresholds, truth_bright):
    """Photon counts that reproduce given identification tags under ``thresholds``.

    Counts for a tag are drawn from the true state's count distribution
    restricted to the tag's classification region, so thresholding returns
    exactly the tag.
    """
    n = np.arange(0, _count_span(count_model))
    out = np.empty(len(tags), dtype=np.int64)
    for state in (False, True):
        pmf = count_model.pmf(n, state)
        for tag, region in ((False, n < thresholds.dark), (True, n > thresholds.bright)):
            sel = (np.asarray(truth_bright) == state) & (np.asarray(tags) == tag)
            k = int(sel.sum())
            if k:
                w = np.where(region, pmf, 0.0)
                if w.sum() == 0:
                    raise InvalidArgument("count model has no mass in a classification region")
                out[sel] = n[_truncated_draw(rng, w, k)]
    return out


# ------------------------------------------------------------------- Ramsey

@dataclass(frozen=True)
class GroundTruth:
    fidelity: float = 0.999994
    offset: float = 0.5
    phase: float = 0.0
    decay_rate: float = 4.0
    precession_time: float = 69.44e-3
    p_bb: float = NOMINAL_P_BB
    p_db: float = NOMINAL_P_DB
    prep_fidelity: float = 1.0
    pi_fidelity: float = 1.0
    count_model: CountModel = field(default_factory=CountModel)
    thresholds: Thresholds = field(default_factory=lambda: Thresholds(3, 5))

    def __post_init__(self):
        for name in ("offset", "p_bb", "p_db", "prep_fidelity", "pi_fidelity"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise InvalidArgument(f"{name} must lie in [0, 1], got {v}")
        if not 0 < self.fidelity <= 1:
            raise InvalidArgument("fidelity must lie in (0, 1]")
        if self.decay_rate < 0:
            raise InvalidArgument("decay rate must be nonnegative")

    def amplitude(self, transports: int) -> float:
        return 0.5 * np.exp(-self.decay_rate * self.precession_time ** 2) * self.fidelity ** transports


def simulate_ramsey(truth: GroundTruth, transports: int, n_phases: int = 19, repetitions: int = 100,
                    seed=None, calibration_trials: int = 10000, with_counts: bool = True):
    """Ramsey scan after ``transports`` transport operations.

    Returns ``(RamseyDataset, PreparedStateRecord or None, counts or None)``.  Per phase, true
    projections are Binomial(N, p_b(phi)); each projection's tag is flipped
    with the identification error of its state; photon counts consistent with
    the tags are attached.  The calibration record contains prepared-dark and
    prepared-bright runs in which preparation fails with probability
    1 - F_p (dark) and 1 - F_p F_pi (bright; imperfect transfer pulse).
    """
    if n_phases < 3 or repetitions < 1:
        raise InvalidArgument("need at least 3 phases and 1 repetition")
    amp = truth.amplitude(transports)
    if amp > truth.offset or truth.offset + amp > 1:
        raise InvalidArgument("fringe leaves [0, 1]: need A <= B and A + B <= 1")
    rng = np.random.default_rng(seed)
    phases = np.linspace(0, 2 * np.pi, n_phases, endpoint=False)
    p_b = truth.offset + amp * np.sin(phases - truth.phase)

    bright_true = rng.random((n_phases, repetitions)) < p_b[:, None]
    flip = rng.random((n_phases, repetitions))
    tag = np.where(bright_true, flip < truth.p_bb, flip >= truth.p_db)
    counts = None
    if with_counts:
        counts = draw_counts_for_tags(rng, tag.ravel(), truth.count_model, truth.thresholds,
                                      bright_true.ravel()).reshape(tag.shape)
    data = RamseyDataset(phases, tag.sum(axis=1), np.full(n_phases, repetitions),
                         transports, truth.precession_time)

    record = simulate_calibration(truth, calibration_trials, rng, transports) if calibration_trials else None
    return data, record, counts


def simulate_fidelity_experiment(truth: GroundTruth, transports=(2, 4000), n_phases: int = 19,
                                 repetitions: int = 100, seed=None, calibration_trials: int = 10000,
                                 with_counts: bool = True):
    """Two Ramsey scans at different transport counts plus one shared
    calibration record, each drawn from its own child of ``seed``."""
    s_lo, s_hi, s_cal = np.random.SeedSequence(seed).spawn(3)
    lo = simulate_ramsey(truth, transports[0], n_phases, repetitions, s_lo, 0, with_counts)
    hi = simulate_ramsey(truth, transports[1], n_phases, repetitions, s_hi, 0, with_counts)
    record = simulate_calibration(truth, calibration_trials, np.random.default_rng(s_cal))
    return lo[0], hi[0], record, (lo[2], hi[2])


def simulate_calibration(truth: GroundTruth, trials: int, rng, transports: int = 0):
    """Prepared-state calibration counts with preparation errors."""
    prep_dark = rng.random(trials) < truth.prep_fidelity
    prep_bright = rng.random(trials) < truth.prep_fidelity * truth.pi_fidelity
    dark_state_bright = ~prep_dark
    bright_state_bright = prep_bright
    cm = truth.count_model
    dark_counts = cm.draw(rng, dark_state_bright)
    bright_counts = cm.draw(rng, bright_state_bright)
    return PreparedStateRecord(dark_counts, bright_counts, transports)


# ----------------------------------------------------------------- tracking

def simulate_tracking(f_s: float, F_b: float, F_d: float, transports: int, skipped,
                      runs_per_point: int = 125, seed=None, F_d_sigma: float | None = None):
    """Photon totals of fluorescence-tracking runs, Poisson around the
    expected total for each number of skipped round trips.

    With ``F_d_sigma`` > 0 the empty-trap calibration is simulated as well:
    the reported dark prior mean is drawn from a normal distribution around
    the true F_d M with standard deviation F_d_sigma M.
    """
    skipped = np.asarray(skipped, dtype=int)
    if f_s < 0 or F_b < 0 or F_d < 0:
        raise InvalidArgument("rates and probabilities must be nonnegative")
    if np.any(skipped < 0) or np.any(2 * skipped > transports):
        raise InvalidArgument("skipped round trips must lie in [0, M/2]")
    rng = np.random.default_rng(seed)
    ms = np.repeat(skipped, runs_per_point)
    lam = tracking_mean(ms, transports, f_s, F_b, F_d)
    photons = rng.poisson(lam)
    sigma = F_d_sigma if F_d_sigma is not None else 0.0
    prior_mean = F_d * transports
    if sigma > 0:
        prior_mean = max(rng.normal(prior_mean, sigma * transports), 0.0)
    return TrackingDataset(ms, photons, transports, prior_mean, sigma * transports)


# ------------------------------------------------------------------- motion

@dataclass(frozen=True)
class MotionState:
    position: np.ndarray
    velocity: np.ndarray
    time: float
    energy: float = np.nan


@dataclass(frozen=True)
class MotionTrace:
    times: np.ndarray
    positions: np.ndarray
    velocities: np.ndarray
    final: MotionState


def secular_energy(model: TrapModel, voltages, position, velocity, guess=None) -> float:
    """Kinetic plus potential energy above the potential minimum for ``voltages``."""
    rmin, pmin, _ = find_minimum(model, voltages, position if guess is None else guess)
    p = model.probe(voltages, position)
    return float(0.5 * model.mass * np.dot(velocity, velocity)
                 + model.charge * (p.value - pmin.value))


def integrate_motion(leg: RampLeg, model: TrapModel, dt: float, init: MotionState | None = None,
                     substeps: int = 8, escape_radius: float | None = None) -> MotionTrace:
    """Classical motion m r'' = -q grad phi(r, t) through one ramp leg.

    Voltages are interpolated linearly between samples; the integrator is
    fixed-step classical Runge-Kutta with ``substeps`` steps per sample.  The
    default initial state is at rest in the minimum of the first sample.  The
    ion counts as escaped once it is farther than ``escape_radius`` (default
    one length scale) from the bounding box of the leg's target positions.
    """
    if substeps < 1:
        raise InvalidArgument("substeps must be >= 1")
    volts = np.asarray(leg.electrode, dtype=float)
    targets = leg.positions
    n = len(volts)
    escape = model.length_scale if escape_radius is None else escape_radius
    box_lo, box_hi = targets.min(axis=0), targets.max(axis=0)
    if init is None:
        r0, _, _ = find_minimum(model, volts[0], targets[0])
        init = MotionState(r0, np.zeros(3), 0.0)
    h = dt / substeps
    qm = model.charge / model.mass

    def accel(r, u):
        try:
            return -qm * model.probe(u, r).gradient
        except OutOfBoundsError as exc:
            raise IonEscaped(f"ion left the model domain: {exc}", (r, None)) from exc

    r = np.array(init.position, dtype=float)
    v = np.array(init.velocity, dtype=float)
    t0 = init.time
    times = t0 + dt * np.arange(n)
    pos = np.empty((n, 3))
    vel = np.empty((n, 3))
    pos[0], vel[0] = r, v
    for i in range(n - 1):
        u0, u1 = volts[i], volts[i + 1]
        for k in range(substeps):
            f0 = k / substeps
            fm = (k + 0.5) / substeps
            f1 = (k + 1) / substeps
            ua = u0 + f0 * (u1 - u0)
            um = u0 + fm * (u1 - u0)
            ub = u0 + f1 * (u1 - u0)
            k1v = accel(r, ua)
            k1r = v
            k2v = accel(r + 0.5 * h * k1r, um)
            k2r = v + 0.5 * h * k1v
            k3v = accel(r + 0.5 * h * k2r, um)
            k3r = v + 0.5 * h * k2v
            k4v = accel(r + h * k3r, ub)
            k4r = v + h * k3v
            r = r + h / 6 * (k1r + 2 * k2r + 2 * k3r + k4r)
            v = v + h / 6 * (k1v + 2 * k2v + 2 * k3v + k4v)
        outside = np.maximum(box_lo - r, 0) + np.maximum(r - box_hi, 0)
        if not np.all(np.isfinite(r)) or np.linalg.norm(outside) > escape:
            state = MotionState(r, v, float(times[i + 1]))
            raise IonEscaped(f"ion escaped at sample {i + 1}", state)
        pos[i + 1], vel[i + 1] = r, v
    energy = secular_energy(model, volts[-1], r, v, targets[-1])
    return MotionTrace(times, pos, vel, MotionState(r, v, float(times[-1]), energy))
