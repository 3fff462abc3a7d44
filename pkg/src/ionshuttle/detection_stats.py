"""State identification from thresholded photon counts.

Counts below the dark threshold are tagged dark, counts above the bright
threshold bright, everything in between is discarded.  Identification
probabilities are conditional on the trial being retained.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import betainc, gammaln

from .errors import InsufficientData, InvalidArgument, ObjectiveUnreachable, SingularInput

logger = logging.getLogger(__name__)

DARK, BRIGHT, DISCARD = 0, 1, -1
_LABELS = {DARK: "dark", BRIGHT: "bright", DISCARD: "discard"}


@dataclass(frozen=True)
class Thresholds:
    dark: int
    bright: int

    def __post_init__(self):
        if self.dark > self.bright + 1:
            raise InvalidArgument(f"dark threshold {self.dark} exceeds bright threshold + 1")


def classify_counts(counts, thresholds: Thresholds) -> np.ndarray:
    c = np.asarray(counts)
    return np.where(c < thresholds.dark, DARK, np.where(c > thresholds.bright, BRIGHT, DISCARD))


def classify(count: int, thresholds: Thresholds) -> str:
    return _LABELS[int(classify_counts(count, thresholds))]


@dataclass(frozen=True)
class PreparedStateRecord:
    """Photon counts of calibration runs with the ion prepared dark or bright.

    Optional veto masks flag trials rejected by the cooling-fluorescence
    monitor; :meth:`filtered` drops them.
    """

    dark_counts: np.ndarray
    bright_counts: np.ndarray
    transports: int = 0
    dark_veto: np.ndarray | None = None
    bright_veto: np.ndarray | None = None

    def __post_init__(self):
        for name in ("dark_counts", "bright_counts"):
            a = np.asarray(getattr(self, name))
            if a.size and (np.any(a < 0) or not np.all(np.equal(np.mod(a, 1), 0))):
                raise InvalidArgument(f"{name} must be nonnegative integers")
            object.__setattr__(self, name, a.astype(np.int64))

    def filtered(self) -> "PreparedStateRecord":
        d = self.dark_counts if self.dark_veto is None else self.dark_counts[~np.asarray(self.dark_veto)]
        b = self.bright_counts if self.bright_veto is None else self.bright_counts[~np.asarray(self.bright_veto)]
        return PreparedStateRecord(d, b, self.transports)

    def histograms(self, n_bins: int | None = None):
        top = int(max(self.dark_counts.max(initial=0), self.bright_counts.max(initial=0))) + 1
        n = top if n_bins is None else max(n_bins, top)
        return (np.bincount(self.dark_counts, minlength=n), np.bincount(self.bright_counts, minlength=n))


@dataclass(frozen=True)
class DetectionCalibration:
    dark_hist: np.ndarray
    bright_hist: np.ndarray
    thresholds: Thresholds
    p_bb: float
    p_db: float
    discard_fraction: float
    discard_bright: float
    discard_dark: float


def _tag_tallies(hist, thresholds: Thresholds):
    n = np.arange(len(hist))
    dark = hist[n < thresholds.dark].sum()
    bright = hist[n > thresholds.bright].sum()
    return dark, bright, hist.sum() - dark - bright


def identification(record: PreparedStateRecord, thresholds: Thresholds) -> DetectionCalibration:
    dh, bh = record.histograms()
    if dh.sum() == 0 or bh.sum() == 0:
        raise InsufficientData("both prepared-state histograms must be nonempty")
    d_dark, d_bright, d_disc = _tag_tallies(dh, thresholds)
    b_dark, b_bright, b_disc = _tag_tallies(bh, thresholds)
    if d_dark + d_bright == 0 or b_dark + b_bright == 0:
        raise InsufficientData("thresholds discard every trial of one prepared state")
    total = dh.sum() + bh.sum()
    return DetectionCalibration(
        dh, bh, thresholds,
        p_bb=float(b_bright / (b_bright + b_dark)),
        p_db=float(d_dark / (d_dark + d_bright)),
        discard_fraction=float((d_disc + b_disc) / total),
        discard_bright=float(b_disc / bh.sum()),
        discard_dark=float(d_disc / dh.sum()),
    )


def _scan(record: PreparedStateRecord):
    """p_bb, p_db and discard fraction for every admissible threshold pair."""
    dh, bh = record.histograms()
    n = len(dh) + 1
    cd = np.concatenate([[0], np.cumsum(dh)])  # cd[t] = #dark-prepared with count < t
    cb = np.concatenate([[0], np.cumsum(bh)])
    cd = np.concatenate([cd, [cd[-1]]])
    cb = np.concatenate([cb, [cb[-1]]])
    rows = []
    nd, nb = dh.sum(), bh.sum()
    for td in range(0, n + 1):
        for tb in range(max(td - 1, 0), n + 1):
            above_d = nd - cd[min(tb + 1, n)]
            above_b = nb - cb[min(tb + 1, n)]
            keep_d = cd[td] + above_d
            keep_b = cb[td] + above_b
            if keep_d == 0 or keep_b == 0:
                continue
            rows.append((td, tb, above_b / keep_b, cd[td] / keep_d,
                         (nd - keep_d + nb - keep_b) / (nd + nb)))
    return np.array(rows)


def pareto_frontier(table: np.ndarray) -> np.ndarray:
    """Rows not dominated in (1 - p_bb, 1 - p_db, discard)."""
    cost = np.column_stack([1 - table[:, 2], 1 - table[:, 3], table[:, 4]])
    keep = np.ones(len(table), dtype=bool)
    for i in range(len(table)):
        dominated = np.all(cost <= cost[i], axis=1) & np.any(cost < cost[i], axis=1)
        keep[i] = not dominated.any()
    return table[keep]


def calibrate_thresholds(record: PreparedStateRecord, objective: str = "auto",
                         target=(0.964, 0.985), max_error: float | None = None,
                         tolerance: float = 0.005) -> DetectionCalibration:
    """Exhaustive scan of threshold pairs.

    ``target``: the pair whose identification probabilities are closest to
    ``target`` (sum of absolute deviations, must be within ``tolerance`` on
    each), ties broken by least discard.  ``min_discard``: least discard
    among pairs with total misidentification (1 - p_bb) + (1 - p_db) at most
    ``max_error``.  ``auto`` tries ``target`` first and falls back to
    ``min_discard`` with the target's total error.
    """
    table = _scan(record)
    if len(table) == 0:
        raise InsufficientData("no threshold pair retains both prepared states")
    if max_error is None:
        max_error = (1 - target[0]) + (1 - target[1])

    def pick(idx):
        td, tb = int(table[idx, 0]), int(table[idx, 1])
        return identification(record, Thresholds(td, tb))

    if objective in ("target", "auto"):
        dev = np.abs(table[:, 2] - target[0]) + np.abs(table[:, 3] - target[1])
        ok = (np.abs(table[:, 2] - target[0]) <= tolerance) & (np.abs(table[:, 3] - target[1]) <= tolerance)
        if ok.any():
            order = np.lexsort((table[:, 4], dev))
            best = next(i for i in order if ok[i])
            return pick(best)
        if objective == "target":
            raise ObjectiveUnreachable("no threshold pair reaches the target identification "
                                       "probabilities", pareto_frontier(table))
    if objective not in ("target", "auto", "min_discard"):
        raise InvalidArgument(f"unknown objective {objective!r}")
    err = (1 - table[:, 2]) + (1 - table[:, 3])
    ok = err <= max_error + 1e-15
    if not ok.any():
        raise ObjectiveUnreachable(f"no threshold pair has total error <= {max_error}",
                                   pareto_frontier(table))
    order = np.lexsort((err, table[:, 4]))
    best = next(i for i in order if ok[i])
    return pick(best)


# ------------------------------------------------------------ posterior of p_b

def bright_tag_probability(p_b, p_bb, p_db):
    return np.asarray(p_b) * p_bb + (1 - np.asarray(p_b)) * (1 - p_db)


def log_binomial(k, n, q):
    q = np.clip(q, 1e-300, 1.0)
    r = np.clip(1 - q, 1e-300, 1.0)
    return (gammaln(n + 1) - gammaln(k + 1) - gammaln(n - k + 1)
            + k * np.log(q) + (n - k) * np.log(r))


def posterior_normalizer(b, n, p_bb, p_db):
    """Integral over p_b in [0, 1] of Binomial(b; n, q(p_b)), in closed form."""
    b = np.asarray(b)
    n = np.asarray(n)
    c = p_bb + p_db - 1
    if abs(c) < 1e-14:
        return np.exp(log_binomial(b, n, 1 - p_db))
    hi = betainc(b + 1, n - b + 1, p_bb)
    lo = betainc(b + 1, n - b + 1, 1 - p_db)
    return (hi - lo) / ((n + 1) * c)


def log_posterior(p_b, b, n, p_bb, p_db):
    """log rho(p_b | b, n) under a uniform prior on p_b."""
    q = bright_tag_probability(p_b, p_bb, p_db)
    return log_binomial(b, n, q) - np.log(posterior_normalizer(b, n, p_bb, p_db))


def posterior_density(b: int, n: int, p_bb: float, p_db: float, grid: int = 2001):
    """Density of the bright-projection probability p_b on a uniform grid."""
    if not 0 <= b <= n:
        raise InvalidArgument(f"bright count {b} outside [0, {n}]")
    p = np.linspace(0.0, 1.0, grid)
    logd = log_binomial(b, n, bright_tag_probability(p, p_bb, p_db))
    d = np.exp(logd - logd.max())
    d /= np.trapezoid(d, p)
    return p, d


# ------------------------------------------------------------------ bootstrap

@dataclass(frozen=True)
class IdGrid:
    p_bb: np.ndarray
    p_db: np.ndarray
    weight: np.ndarray
    n_resamples: int = 0
    n_redrawn: int = 0
    bins: int = 10

    def __len__(self):
        return len(self.weight)

    def to_json(self) -> str:
        return json.dumps({"p_bb": self.p_bb.tolist(), "p_db": self.p_db.tolist(),
                           "weight": self.weight.tolist(), "n_resamples": self.n_resamples,
                           "n_redrawn": self.n_redrawn, "bins": self.bins}, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "IdGrid":
        d = json.loads(text)
        return cls(np.array(d["p_bb"]), np.array(d["p_db"]), np.array(d["weight"]),
                   d.get("n_resamples", 0), d.get("n_redrawn", 0), d.get("bins", 10))

    @classmethod
    def single(cls, p_bb, p_db):
        return cls(np.array([p_bb]), np.array([p_db]), np.array([1.0]), 0, 0, 1)


def _resample_block(tallies_b, tallies_d, size, seed):
    """Multinomial resampling of tag tallies; equivalent to drawing trials
    with replacement.  Resamples with no retained trial are redrawn."""
    rng = np.random.default_rng(seed)
    nb, nd = sum(tallies_b), sum(tallies_d)
    fb = np.asarray(tallies_b) / nb
    fd = np.asarray(tallies_d) / nd
    out_b = np.empty(size)
    out_d = np.empty(size)
    redrawn = 0
    for i in range(size):
        while True:
            xb = rng.multinomial(nb, fb)
            xd = rng.multinomial(nd, fd)
            kb = xb[0] + xb[1]
            kd = xd[0] + xd[1]
            if kb > 0 and kd > 0:
                break
            redrawn += 1
            if redrawn > 1000 * size:
                raise InsufficientData("resamples keep losing every retained trial")
        out_b[i] = xb[1] / kb
        out_d[i] = xd[0] / kd
    return out_b, out_d, redrawn


def equal_count_bins(values, bins: int) -> np.ndarray:
    """Bin index per value so every bin holds the same number of values
    (sizes differ by at most one); ties are split in a stable order."""
    order = np.argsort(values, kind="stable")
    idx = np.empty(len(values), dtype=int)
    idx[order] = (np.arange(len(values)) * bins) // len(values)
    return idx


def bootstrap_id_grid(record: PreparedStateRecord, thresholds: Thresholds, resamples: int = 10000,
                      seed=None, bins: int = 10, jobs: int = 1, block: int = 1000) -> IdGrid:
    """Bootstrap distribution of (p_bb, p_db) condensed to a bins x bins grid.

    Each marginal is cut into ``bins`` equally populated bins; a cell takes
    the mean p_bb of its p_bb-bin and the mean p_db of its p_db-bin and the
    product of the two marginal masses as weight.  Identical cells are merged.
    Resamples run in fixed blocks with spawned seeds, so the result does not
    depend on ``jobs``.
    """
    if resamples < 100:
        raise InvalidArgument("need at least 100 resamples")
    dh, bh = record.histograms()
    if dh.sum() == 0 or bh.sum() == 0:
        raise InsufficientData("both prepared-state histograms must be nonempty")
    d_dark, d_bright, d_disc = _tag_tallies(dh, thresholds)
    b_dark, b_bright, b_disc = _tag_tallies(bh, thresholds)
    tallies_b = (b_dark, b_bright, b_disc)
    tallies_d = (d_dark, d_bright, d_disc)

    sizes = [block] * (resamples // block) + ([resamples % block] if resamples % block else [])
    seeds = np.random.SeedSequence(seed).spawn(len(sizes))
    if jobs != 1 and len(sizes) > 1:
        from joblib import Parallel, delayed
        parts = Parallel(n_jobs=jobs)(delayed(_resample_block)(tallies_b, tallies_d, s, q)
                                      for s, q in zip(sizes, seeds))
    else:
        parts = [_resample_block(tallies_b, tallies_d, s, q) for s, q in zip(sizes, seeds)]
    pbb = np.concatenate([p[0] for p in parts])
    pdb = np.concatenate([p[1] for p in parts])
    redrawn = int(sum(p[2] for p in parts))
    if redrawn:
        logger.info("bootstrap redrew %d degenerate resamples", redrawn)

    ib = equal_count_bins(pbb, bins)
    id_ = equal_count_bins(pdb, bins)
    mean_b = np.array([pbb[ib == k].mean() for k in range(bins)])
    mean_d = np.array([pdb[id_ == k].mean() for k in range(bins)])
    mass_b = np.bincount(ib, minlength=bins) / resamples
    mass_d = np.bincount(id_, minlength=bins) / resamples

    cells: dict = {}
    for i in range(bins):
        for j in range(bins):
            key = (mean_b[i], mean_d[j])
            cells[key] = cells.get(key, 0.0) + mass_b[i] * mass_d[j]
    keys = list(cells)
    return IdGrid(np.array([k[0] for k in keys]), np.array([k[1] for k in keys]),
                  np.array([cells[k] for k in keys]), resamples, redrawn, bins)


# --------------------------------------------------------- preparation bias

def bias_correct(p_bb: float, p_db: float, F_p: float, F_pi: float):
    """Identification probabilities corrected for imperfect state preparation
    (fidelity ``F_p``) and an imperfect transfer pulse (fidelity ``F_pi``)."""
    if F_pi <= 0:
        raise InvalidArgument("pi-pulse fidelity must be positive")
    denom = (1 - 2 * F_p) * F_pi
    if abs(1 - 2 * F_p) < 1e-15:
        raise SingularInput("preparation fidelity 0.5 makes the correction singular")
    if F_p <= 0.5:
        raise InvalidArgument("preparation fidelity must exceed 0.5")
    bb = (p_db * (2 * F_p * F_pi - F_p - F_pi) + F_p * (1 - 2 * F_pi - p_bb) + F_pi) / denom
    db = (p_db * (-2 * F_p * F_pi + F_p + F_pi - 1) + (F_p - 1) * (p_bb - 1)) / denom
    return float(bb), float(db)


def identification_matrix(p_bb: float, p_db: float) -> np.ndarray:
    return np.array([[p_bb, 1 - p_db], [1 - p_bb, p_db]])


def unfold_counts(b_tag, d_tag, p_bb: float, p_db: float):
    """Invert the identification matrix: true (b, d) from tagged counts."""
    det = p_bb + p_db - 1
    if abs(det) < 1e-15:
        raise SingularInput("identification matrix is singular (p_bb + p_db = 1)")
    b_tag = np.asarray(b_tag, dtype=float)
    d_tag = np.asarray(d_tag, dtype=float)
    b = (p_db * b_tag - (1 - p_db) * d_tag) / det
    d = (p_bb * d_tag - (1 - p_bb) * b_tag) / det
    return b, d
