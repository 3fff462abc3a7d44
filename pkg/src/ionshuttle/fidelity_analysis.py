"""Likelihood analysis of Ramsey fringes and fluorescence tracking.

Fringe model: p_b(phi) = B + A sin(phi - Phi).  Each phase point contributes
the posterior density of p_b given its tagged bright count, so imperfect
state identification broadens the likelihood instead of biasing it.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from .detection_stats import IdGrid, log_binomial, posterior_normalizer
from .errors import (DegenerateLikelihood, InsufficientData, InvalidArgument, Unidentifiable)

logger = logging.getLogger(__name__)

N_PHASE_STARTS = 8


@dataclass(frozen=True)
class RamseyDataset:
    phases: np.ndarray
    bright: np.ndarray
    trials: np.ndarray
    transports: int
    precession_time: float = 69.44e-3

    def __post_init__(self):
        ph = np.asarray(self.phases, dtype=float)
        b = np.asarray(self.bright, dtype=np.int64)
        n = np.asarray(self.trials, dtype=np.int64)
        if not (ph.shape == b.shape == n.shape) or ph.ndim != 1:
            raise InvalidArgument("phases, bright counts and trials must be equal-length vectors")
        if len(np.unique(np.mod(ph, 2 * np.pi))) < 3:
            raise InvalidArgument("need at least 3 distinct phases")
        if np.any(b < 0) or np.any(b > n):
            raise InvalidArgument("bright counts must lie in [0, trials]")
        object.__setattr__(self, "phases", ph)
        object.__setattr__(self, "bright", b)
        object.__setattr__(self, "trials", n)

    def scaled(self, factor: int) -> "RamseyDataset":
        """Same frequencies with ``factor`` times the trials."""
        return RamseyDataset(self.phases, self.bright * factor, self.trials * factor,
                             self.transports, self.precession_time)


@dataclass(frozen=True)
class RamseyFit:
    amplitude: float
    offset: float
    phase: float
    log_likelihood: float


@dataclass(frozen=True)
class LikelihoodCurve:
    """Likelihood on a grid, normalized to unit area.

    ``log_values`` are the unnormalized log-likelihoods; ``log_norm`` is the
    log of the area under exp(log_values).
    """

    grid: np.ndarray
    log_values: np.ndarray
    log_norm: float
    mode: float
    interval: tuple

    @property
    def density(self) -> np.ndarray:
        return np.exp(self.log_values - self.log_norm)

    @property
    def width(self) -> float:
        return self.interval[1] - self.interval[0]

    @classmethod
    def from_log(cls, grid, log_values) -> "LikelihoodCurve":
        grid = np.asarray(grid, dtype=float)
        lv = np.asarray(log_values, dtype=float)
        if np.any(np.diff(grid) <= 0):
            raise InvalidArgument("likelihood grid must be strictly increasing")
        if not np.any(np.isfinite(lv)):
            raise DegenerateLikelihood("likelihood vanishes on the whole grid")
        top = np.nanmax(lv)
        area = np.trapezoid(np.exp(lv - top), grid)
        if not area > 0:
            raise DegenerateLikelihood("likelihood has zero area on the grid")
        mode = _refined_mode(grid, lv)
        lo, hi = likelihood_interval(grid, lv)
        return cls(grid, lv, float(top + np.log(area)), mode, (min(lo, mode), max(hi, mode)))

    @classmethod
    def gaussian(cls, grid, center, sigma) -> "LikelihoodCurve":
        grid = np.asarray(grid, dtype=float)
        return cls.from_log(grid, -0.5 * ((grid - center) / sigma) ** 2)


def _refined_mode(grid, lv):
    i = int(np.nanargmax(lv))
    if 0 < i < len(grid) - 1:
        x0, x1, x2 = grid[i - 1:i + 2]
        y0, y1, y2 = lv[i - 1:i + 2]
        denom = (x0 - x1) * (x0 - x2) * (x1 - x2)
        a = (x2 * (y1 - y0) + x1 * (y0 - y2) + x0 * (y2 - y1)) / denom
        b = (x2 ** 2 * (y0 - y1) + x1 ** 2 * (y2 - y0) + x0 ** 2 * (y1 - y2)) / denom
        if a < 0:
            x = -b / (2 * a)
            if x0 <= x <= x2:
                return float(x)
    return float(grid[i])


def likelihood_interval(grid, log_values, drop: float = 0.5):
    """Where the log-likelihood falls ``drop`` below its maximum, linearly
    interpolated; clamped to the grid ends."""
    lv = np.asarray(log_values, dtype=float)
    i = int(np.nanargmax(lv))
    level = lv[i] - drop
    lo = grid[0]
    for j in range(i, 0, -1):
        if lv[j - 1] < level:
            lo = grid[j - 1] + (level - lv[j - 1]) / (lv[j] - lv[j - 1]) * (grid[j] - grid[j - 1])
            break
    hi = grid[-1]
    for j in range(i, len(grid) - 1):
        if lv[j + 1] < level:
            hi = grid[j] + (lv[j] - level) / (lv[j] - lv[j + 1]) * (grid[j + 1] - grid[j])
            break
    return float(lo), float(hi)


# ------------------------------------------------------------------ fringes

def _check_data(data: RamseyDataset):
    if data.trials.sum() == 0:
        raise InsufficientData("dataset has no retained trials")


def ramsey_log_likelihood(data: RamseyDataset, amplitude, offset, phase, p_bb, p_db):
    """Sum over phase points of log rho(p_b(phi_k) | b_k, N_k); broadcasts
    over the parameter arrays."""
    A = np.asarray(amplitude, dtype=float)[..., None]
    B = np.asarray(offset, dtype=float)[..., None]
    P = np.asarray(phase, dtype=float)[..., None]
    p = B + A * np.sin(data.phases - P)
    q = p * p_bb + (1 - p) * (1 - p_db)
    logz = np.log(posterior_normalizer(data.bright, data.trials, p_bb, p_db))
    return np.sum(log_binomial(data.bright, data.trials, q) - logz, axis=-1)


def _linear_start(data: RamseyDataset, p_bb, p_db):
    """Closed-form start from a least-squares fit of the unfolded frequencies."""
    c = p_bb + p_db - 1
    f = (data.bright / np.maximum(data.trials, 1) - (1 - p_db)) / c
    X = np.column_stack([np.ones_like(data.phases), np.sin(data.phases), np.cos(data.phases)])
    w = np.sqrt(data.trials)
    coef = np.linalg.lstsq(X * w[:, None], f * w, rcond=None)[0]
    amp = min(np.hypot(coef[1], coef[2]), 0.5)
    phase = np.arctan2(-coef[2], coef[1])
    off = np.clip(coef[0], amp, 1 - amp)
    return amp, off, phase


def fit_ramsey(data: RamseyDataset, p_bb: float, p_db: float) -> RamseyFit:
    """Maximum-likelihood fringe parameters within A <= B <= 1 - A.

    The offset is parametrized as B = A + (1 - 2A) u with u in [0, 1] so the
    feasible set is a box.  Starts: a closed-form linear fit plus eight
    evenly spaced phases; the best local optimum wins.
    """
    _check_data(data)

    def negll(x):
        a, u, ph = x
        return -float(ramsey_log_likelihood(data, a, a + (1 - 2 * a) * u, ph, p_bb, p_db))

    a0, b0, ph0 = _linear_start(data, p_bb, p_db)
    u0 = 0.5 if a0 >= 0.5 else (b0 - a0) / (1 - 2 * a0)
    starts = [(a0, u0, ph0)] + [(max(a0, 0.05), u0, 2 * np.pi * j / N_PHASE_STARTS)
                                for j in range(N_PHASE_STARTS)]
    bounds = [(0.0, 0.5), (0.0, 1.0), (None, None)]
    best = None
    for x0 in starts:
        res = optimize.minimize(negll, np.array(x0, dtype=float), method="L-BFGS-B", bounds=bounds,
                                options={"ftol": 1e-15, "gtol": 1e-10, "maxiter": 2000})
        if best is None or res.fun < best.fun - 1e-12:
            best = res
    a, u, ph = best.x
    ph = float(np.mod(ph + np.pi, 2 * np.pi) - np.pi)
    return RamseyFit(float(a), float(a + (1 - 2 * a) * u), ph, -float(best.fun))


def _profile_over_amplitude(data, p_bb, p_db, amps, start_offset, start_phase, iters=60):
    """Maximize over (B, Phi) at every amplitude by projected Fisher scoring.

    Amplitudes drop out of the iteration once a step no longer raises their
    log-likelihood by more than 1e-13.
    """
    c = p_bb + p_db - 1
    c0 = 1 - p_db
    b = data.bright.astype(float)
    n = data.trials.astype(float)
    ph = data.phases

    def loglik(A, B, P):
        p = B[:, None] + A[:, None] * np.sin(ph - P[:, None])
        q = np.clip(c0 + c * p, 1e-300, 1 - 1e-16)
        return np.sum(b * np.log(q) + (n - b) * np.log1p(-q), axis=1)

    B = np.clip(np.full(len(amps), start_offset), amps, 1 - amps)
    P = np.full(len(amps), float(start_phase))
    cur = loglik(amps, B, P)
    active = np.arange(len(amps))
    for _ in range(iters):
        if not len(active):
            break
        A, Ba, Pa, ca = amps[active], B[active], P[active], cur[active]
        s = np.sin(ph - Pa[:, None])
        co = np.cos(ph - Pa[:, None])
        q = np.clip(c0 + c * (Ba[:, None] + A[:, None] * s), 1e-12, 1 - 1e-12)
        g = c * (b / q - (n - b) / (1 - q))
        info = c * c * n / (q * (1 - q))
        dP = -A[:, None] * co
        gB = g.sum(axis=1)
        gP = np.sum(g * dP, axis=1)
        jBB = info.sum(axis=1)
        jBP = np.sum(info * dP, axis=1)
        jPP = np.sum(info * dP * dP, axis=1) + 1e-12
        det = jBB * jPP - jBP ** 2
        det = np.where(det > 1e-300, det, np.inf)
        stepB = (jPP * gB - jBP * gP) / det
        stepP = (jBB * gP - jBP * gB) / det
        newB, newP, new = Ba.copy(), Pa.copy(), ca.copy()
        todo = np.arange(len(active))
        t = 1.0
        for _ in range(20):
            cB = np.clip(Ba[todo] + t * stepB[todo], A[todo], 1 - A[todo])
            cP = Pa[todo] + t * stepP[todo]
            val = loglik(A[todo], cB, cP)
            ok = val >= ca[todo] - 1e-12
            idx = todo[ok]
            newB[idx], newP[idx], new[idx] = cB[ok], cP[ok], val[ok]
            todo = todo[~ok]
            if not len(todo):
                break
            t /= 2
        B[active], P[active], cur[active] = newB, newP, new
        active = active[new - ca > 1e-13]
    return cur


def profile_likelihood_A(data: RamseyDataset, p_bb: float, p_db: float, amp_grid=None,
                         fit: RamseyFit | None = None) -> LikelihoodCurve:
    """Profile likelihood of the fringe amplitude, (B, Phi) maximized out."""
    _check_data(data)
    amp_grid = np.linspace(0.0, 0.5, 2001) if amp_grid is None else np.asarray(amp_grid, dtype=float)
    fit = fit or fit_ramsey(data, p_bb, p_db)
    ll = _profile_over_amplitude(data, p_bb, p_db, amp_grid, fit.offset, fit.phase)
    logz = np.sum(np.log(posterior_normalizer(data.bright, data.trials, p_bb, p_db)))
    const = np.sum(log_binomial(data.bright, data.trials, 0.5)
                   - data.bright * np.log(0.5) - (data.trials - data.bright) * np.log(0.5))
    return LikelihoodCurve.from_log(amp_grid, ll + const - logz)


def average_likelihood(data: RamseyDataset, grid: IdGrid, amp_grid=None, jobs: int = 1) -> LikelihoodCurve:
    """Weighted sum of per-cell profile likelihoods (in probability, not log).

    Each cell's curve is normalized to unit area first, so a cell's influence
    is its bootstrap weight alone and not how well its identification
    probabilities happen to fit the fringe data.
    """
    if abs(grid.weight.sum() - 1) > 1e-9:
        raise InvalidArgument("identification grid weights must sum to 1")
    amp_grid = np.linspace(0.0, 0.5, 2001) if amp_grid is None else np.asarray(amp_grid, dtype=float)

    def cell(k):
        curve = profile_likelihood_A(data, grid.p_bb[k], grid.p_db[k], amp_grid)
        return curve.log_values - curve.log_norm

    if jobs != 1:
        from joblib import Parallel, delayed
        logs = Parallel(n_jobs=jobs)(delayed(cell)(k) for k in range(len(grid)))
    else:
        logs = [cell(k) for k in range(len(grid))]
    stacked = np.array(logs) + np.log(grid.weight)[:, None]
    top = stacked.max()
    total = top + np.log(np.sum(np.exp(stacked - top), axis=0))
    return LikelihoodCurve.from_log(amp_grid, total)


def cell_amplitudes(data: RamseyDataset, grid: IdGrid) -> np.ndarray:
    """Best-fit amplitude for every cell of an identification grid."""
    return np.array([fit_ramsey(data, grid.p_bb[k], grid.p_db[k]).amplitude for k in range(len(grid))])


# ----------------------------------------------------------------- fidelity

def fidelity_from_amplitudes(a_lo: float, a_hi: float, m_lo: int, m_hi: int) -> float:
    """Per-transport amplitude ratio (A_hi / A_lo)^(1 / (M_hi - M_lo))."""
    return float((a_hi / a_lo) ** (1.0 / (m_hi - m_lo)))


def _fidelity_log_curve(lo: LikelihoodCurve, hi: LikelihoodCurve, dm: int, F):
    a = lo.grid
    la = lo.density
    keep = la > la.max() * 1e-300
    a, la = a[keep], la[keep]
    out = np.empty(len(F))
    chunk = max(1, 4_000_000 // max(len(a), 1))
    for s in range(0, len(F), chunk):
        f = F[s:s + chunk, None]
        scale = f ** dm
        lh = np.interp(a[None, :] * scale, hi.grid, hi.density, left=0.0, right=0.0)
        integrand = la[None, :] * lh * a[None, :] * dm * f ** (dm - 1)
        out[s:s + chunk] = np.trapezoid(integrand, a, axis=1)
    with np.errstate(divide="ignore"):
        return np.log(out)


def fidelity_likelihood(lo: LikelihoodCurve, hi: LikelihoodCurve, m_lo: int, m_hi: int,
                        n_points: int = 4001, span=(50.0, 10.0), refine: bool = True) -> LikelihoodCurve:
    """Likelihood of the per-transport fidelity F from two amplitude curves.

    L(F) = integral of L_lo(a) L_hi(a F^dM) a dM F^(dM - 1) da.  Evaluated on
    [1 - span[0]/dM, 1 + span[1]/dM], then again on a grid of the same size
    over the region where the coarse curve is non-negligible.
    """
    if not m_hi > m_lo >= 0:
        raise InvalidArgument("need M_hi > M_lo >= 0")
    dm = m_hi - m_lo
    F = np.linspace(1 - span[0] / dm, 1 + span[1] / dm, n_points)
    lv = _fidelity_log_curve(lo, hi, dm, F)
    if not np.any(np.isfinite(lv)):
        raise DegenerateLikelihood("amplitude likelihoods do not overlap for any F on the grid")
    if refine:
        top = np.nanmax(lv)
        sup = np.flatnonzero(lv > top - 40)
        i0, i1 = max(sup[0] - 1, 0), min(sup[-1] + 1, len(F) - 1)
        if i1 - i0 < n_points:
            F = np.linspace(F[i0], F[i1], n_points)
            lv = _fidelity_log_curve(lo, hi, dm, F)
    return LikelihoodCurve.from_log(F, lv)


def adjust_for_failures(F: float, failures: float, m_lo: int, m_hi: int, sigma: float):
    """Fidelity and its uncertainty when ``failures`` of the transports did not happen."""
    dm = m_hi - m_lo
    if failures < 0 or failures >= dm:
        raise InvalidArgument(f"failed transports must lie in [0, {dm})")
    expo = dm / (dm - failures)
    return float(F ** expo), float(expo * F ** (failures / (dm - failures)) * sigma)


# ----------------------------------------------------------------- tracking

def tracking_mean(skipped, transports, f_s, F_b, F_d):
    """Expected photon total of one tracking run with ``skipped`` round trips left out."""
    ms = np.asarray(skipped, dtype=float)
    moved = f_s * (transports - 2 * ms)
    return F_b * (ms + moved) + F_d * ((transports - ms) - moved)


@dataclass(frozen=True)
class TrackingDataset:
    skipped: np.ndarray
    photons: np.ndarray
    transports: int
    dark_prior_mean: float  # photons per run for an absent ion (F_d * M)
    dark_prior_sigma: float = 0.0

    def __post_init__(self):
        ms = np.asarray(self.skipped, dtype=np.int64)
        ph = np.asarray(self.photons, dtype=np.int64)
        if ms.shape != ph.shape:
            raise InvalidArgument("skipped and photon arrays must match")
        if np.any(ms < 0) or np.any(2 * ms > self.transports):
            raise InvalidArgument("skipped round trips must lie in [0, M/2]")
        object.__setattr__(self, "skipped", ms)
        object.__setattr__(self, "photons", ph)


@dataclass(frozen=True)
class TrackingFit:
    f_s: float
    interval: tuple
    F_b: float
    F_d: float
    success: float
    curve: LikelihoodCurve
    slope: float
    slope_err: float
    offset: float
    offset_err: float


def _tracking_profile(ms, runs, totals, M, prior_mu, prior_sigma, fs):
    """Maximize the Poisson log-likelihood over (F_b, F_d) at every f_s."""
    xb = ms[None, :] + fs[:, None] * (M - 2 * ms[None, :])
    xd = (M - ms[None, :]) - fs[:, None] * (M - 2 * ms[None, :])
    mean_rate = totals.sum() / runs.sum()
    fd = np.full(len(fs), prior_mu / M if prior_mu > 0 else mean_rate / M)
    fb = np.full(len(fs), max(mean_rate / max(ms.mean(), 1.0), fd[0] * 2))
    inv_var = 0.0 if prior_sigma <= 0 else (M / prior_sigma) ** 2

    def value(fb, fd):
        lam = np.maximum(fb[:, None] * xb + fd[:, None] * xd, 1e-300)
        ll = np.sum(totals * np.log(lam) - runs * lam, axis=1)
        if inv_var:
            ll -= 0.5 * inv_var * (fd - prior_mu / M) ** 2
        return ll

    cur = value(fb, fd)
    for _ in range(100):
        lam = np.maximum(fb[:, None] * xb + fd[:, None] * xd, 1e-300)
        r = totals / lam - runs
        gb = np.sum(r * xb, axis=1)
        gd = np.sum(r * xd, axis=1)
        w = totals / lam ** 2
        hbb = -np.sum(w * xb * xb, axis=1) - 1e-30
        hbd = -np.sum(w * xb * xd, axis=1)
        hdd = -np.sum(w * xd * xd, axis=1) - 1e-30
        if inv_var:
            gd -= inv_var * (fd - prior_mu / M)
            hdd -= inv_var
        det = hbb * hdd - hbd ** 2
        sb = -(hdd * gb - hbd * gd) / det
        sd = -(hbb * gd - hbd * gb) / det
        t = np.ones(len(fs))
        done = np.zeros(len(fs), dtype=bool)
        nb, nd, nv = fb, fd, cur
        for _ in range(30):
            cb = np.maximum(fb + t * sb, 1e-12)
            cd = np.maximum(fd + t * sd, 1e-12)
            v = value(cb, cd)
            ok = (v >= cur - 1e-12) & ~done
            nb, nd, nv = np.where(ok, cb, nb), np.where(ok, cd, nd), np.where(ok, v, nv)
            done |= ok
            if done.all():
                break
            t = np.where(done, t, t / 2)
        gain = np.max(nv - cur)
        fb, fd, cur = nb, nd, nv
        if gain < 1e-12:
            break
    return cur, fb, fd


def linear_tracking_fit(data: TrackingDataset):
    """Ordinary least squares of photons per run against skipped round trips."""
    x = data.skipped.astype(float)
    y = data.photons.astype(float)
    X = np.column_stack([np.ones_like(x), x])
    coef, res, *_ = np.linalg.lstsq(X, y, rcond=None)
    dof = max(len(y) - 2, 1)
    s2 = np.sum((y - X @ coef) ** 2) / dof
    cov = s2 * np.linalg.inv(X.T @ X)
    return float(coef[1]), float(np.sqrt(cov[1, 1])), float(coef[0]), float(np.sqrt(cov[0, 0]))


def failure_rate_from_line(slope, slope_err, offset, offset_err, dark_total, dark_total_err, transports):
    """f_s and its propagated error from a straight-line fit.

    slope = (F_b - F_d)(1 - 2 f_s) and offset = M F_d + f_s M (F_b - F_d), so
    r = (offset - M F_d) / (M slope) = f_s / (1 - 2 f_s).
    """
    r = (offset - dark_total) / (transports * slope)
    f = r / (1 + 2 * r)
    var_r = ((offset_err ** 2 + dark_total_err ** 2) / (transports * slope) ** 2
             + (r * slope_err / slope) ** 2)
    return float(f), float(np.sqrt(var_r) / (1 + 2 * r) ** 2)


def fit_transport_fidelity(data: TrackingDataset, fs_grid=None) -> TrackingFit:
    """Poisson maximum likelihood for the failure fraction f_s.

    F_d carries a Gaussian prior from the empty-trap calibration; the
    interval is the profile-likelihood rule restricted to f_s in [0, 0.5].
    """
    levels = np.unique(data.skipped)
    if len(levels) < 2:
        raise Unidentifiable("all runs skip the same number of round trips")
    if len(levels) < 3:
        logger.warning("only %d distinct skip counts; f_s rests on the dark prior", len(levels))
    runs = np.array([np.sum(data.skipped == m) for m in levels], dtype=float)
    totals = np.array([data.photons[data.skipped == m].sum() for m in levels], dtype=float)
    if fs_grid is None:
        fs_grid = np.unique(np.concatenate([np.linspace(0, 0.02, 4001), np.linspace(0.02, 0.5, 961)]))
    ll, fb, fd = _tracking_profile(levels.astype(float), runs, totals, data.transports,
                                   data.dark_prior_mean, data.dark_prior_sigma, fs_grid)
    curve = LikelihoodCurve.from_log(fs_grid, ll)
    i = int(np.argmax(ll))
    slope, se_s, off, se_o = linear_tracking_fit(data)
    return TrackingFit(curve.mode, curve.interval, float(fb[i]), float(fd[i]), 1 - curve.mode,
                       curve, slope, se_s, off, se_o)


# ---------------------------------------------------------------- dephasing

@dataclass(frozen=True)
class DephasingParams:
    decay_rate: float = 4.0            # 1/s^2
    phase_sigma: float = 0.0           # rad
    dnu_dB: float = 39.7e6             # Hz/T
    dB_dx: float = 10.6e-3             # T/m
    field: float = 0.0                 # T
    transport_time: float = 12.8e-6    # s

    def __post_init__(self):
        if self.decay_rate < 0 or self.phase_sigma < 0:
            raise InvalidArgument("decay rate and phase spread must be nonnegative")
        for name in ("dnu_dB", "dB_dx", "field", "transport_time"):
            if not np.isfinite(getattr(self, name)):
                raise InvalidArgument(f"{name} must be finite")


def contrast_factor(phase_sigma):
    return np.exp(-np.asarray(phase_sigma) ** 2 / 2)


def phase_sigma_from_fidelity(F):
    F = np.asarray(F, dtype=float)
    if np.any(F > 1) or np.any(F <= 0):
        raise InvalidArgument("fidelity must lie in (0, 1] to extract a phase spread")
    return np.sqrt(np.maximum(-2 * np.log(F), 0.0))


def position_sensitivity(dnu_dB, dB_dx):
    return dnu_dB * dB_dx


def transition_shift(dnu_dx, distance):
    return dnu_dx * distance


def ramsey_phase(delta_nu, t):
    return 2 * np.pi * delta_nu * t


def position_sigma(phase_sigma, t, dnu_dx):
    """Spread of transport trajectories that would produce ``phase_sigma``."""
    return phase_sigma / (2 * np.pi * t * dnu_dx)


def static_decay_amplitude(t, decay_rate):
    return 0.5 * np.exp(-decay_rate * np.asarray(t) ** 2)


def dephasing_toolbox(params: DephasingParams, fidelity: float | None = None, distance: float = 280e-6,
                      precession_time: float = 69.44e-3):
    """Derived dephasing quantities for one parameter set."""
    sigma = params.phase_sigma if fidelity is None else float(phase_sigma_from_fidelity(fidelity))
    dnu_dx = position_sensitivity(params.dnu_dB, params.dB_dx)
    shift = transition_shift(dnu_dx, distance)
    return {
        "phase_sigma": sigma,
        "contrast_factor": float(contrast_factor(sigma)),
        "dnu_dx": dnu_dx,
        "transition_shift": shift,
        "ramsey_phase": float(ramsey_phase(shift, params.transport_time)),
        "position_sigma": float(position_sigma(sigma, params.transport_time, dnu_dx)) if dnu_dx else np.inf,
        "static_amplitude": float(static_decay_amplitude(precession_time, params.decay_rate)),
    }


# ----------------------------------------------------------------- pipeline

@dataclass(frozen=True)
class FidelityEstimate:
    fidelity: float
    interval: tuple
    curve: LikelihoodCurve
    amplitude_lo: LikelihoodCurve
    amplitude_hi: LikelihoodCurve
    transports: tuple

    def to_dict(self) -> dict:
        return {
            "fidelity": self.fidelity,
            "interval": list(self.interval),
            "amplitude_lo": {"mode": self.amplitude_lo.mode, "interval": list(self.amplitude_lo.interval)},
            "amplitude_hi": {"mode": self.amplitude_hi.mode, "interval": list(self.amplitude_hi.interval)},
            "transports": list(self.transports),
        }


def estimate_fidelity(data_lo: RamseyDataset, data_hi: RamseyDataset, identification,
                      amp_grid=None, jobs: int = 1) -> FidelityEstimate:
    """Per-transport fidelity from two Ramsey scans.

    ``identification`` is either a ``(p_bb, p_db)`` pair, used as a point
    estimate, or an ``IdGrid`` whose cells are averaged over.
    """
    if data_hi.transports <= data_lo.transports:
        raise InvalidArgument("second dataset must have more transports than the first")
    curves = []
    for data in (data_lo, data_hi):
        if isinstance(identification, IdGrid):
            curves.append(average_likelihood(data, identification, amp_grid, jobs=jobs))
        else:
            p_bb, p_db = identification
            curves.append(profile_likelihood_A(data, p_bb, p_db, amp_grid))
    curve = fidelity_likelihood(curves[0], curves[1], data_lo.transports, data_hi.transports)
    return FidelityEstimate(curve.mode, curve.interval, curve, curves[0], curves[1],
                            (data_lo.transports, data_hi.transports))
