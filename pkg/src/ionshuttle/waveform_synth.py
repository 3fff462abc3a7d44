"""Filter-aware synthesis of transport voltage ramps.

Each trajectory step asks for six potential conditions at the target
position r_i: vanishing gradient (3 rows), the axial curvature m w_x^2 / q,
no x-z cross term, and a fixed potential value.  They are solved as a
weighted, box-constrained least-squares problem over the dc voltages, where
the boxes are the electrode voltages the filtered source can still reach.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from scipy.optimize import lsq_linear

from .errors import InfeasibleStep, InvalidArgument, VoltageBoundError
from .filter_chain import (LD, FilterSpec, FilterState, apply_forward, back_solve,
                           reachable_interval, steady_state)
from .trajectory import TransportPlan
from .trap_model import TrapModel, curvature_target, find_minimum

logger = logging.getLogger(__name__)

ROW_NAMES = ("dx", "dy", "dz", "dxx", "dxz", "phi")
DEFAULT_ROW_WEIGHTS = (1.0, 1.0, 1.0, 1.0, 0.1, 0.01)


@dataclass(frozen=True)
class ConstraintTarget:
    position: np.ndarray
    curvature: float
    phi0: float | None = None
    weights: tuple = DEFAULT_ROW_WEIGHTS

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.shape != (6,) or np.any(w < 0):
            raise InvalidArgument("need 6 nonnegative row weights")
        if np.any(w[:3] <= 0):
            raise InvalidArgument("the three gradient rows need positive weight")
        object.__setattr__(self, "weights", tuple(w))
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float))

    @property
    def row_weights(self) -> np.ndarray:
        w = np.array(self.weights)
        if self.phi0 is None:
            w[5] = 0.0
        return w


@dataclass(frozen=True)
class ConstraintRows:
    """Scaled linear rows ``matrix @ U ~ rhs``.

    Physical row ``k`` equals ``matrix[k] / scale[k]``; scaling maps the
    gradient rows to volts over the length l = sqrt(1 V / curvature) and the
    curvature rows to volts over l^2, so all rows are comparable.
    """

    matrix: np.ndarray
    rhs: np.ndarray
    scale: np.ndarray
    names: tuple = ROW_NAMES

    def residuals(self, voltages) -> np.ndarray:
        """Unscaled residuals (V/m, V/m^2, V)."""
        return (self.matrix @ np.asarray(voltages, dtype=float) - self.rhs) / self.scale


def row_scale(curvature: float, length_scale: float) -> np.ndarray:
    ell = np.sqrt(1.0 / abs(curvature)) if curvature != 0 else length_scale
    return np.array([ell, ell, ell, ell ** 2, ell ** 2, 1.0])


def constraint_rows(model: TrapModel, target: ConstraintTarget) -> ConstraintRows:
    """Six rows over the dc voltages; the fixed pseudopotential and stray
    contributions are moved to the right-hand side."""
    r = target.position[None]
    val, grad, hess = model.dc_response(r)
    fval, fgrad, fhess = model.fixed_response(r)
    matrix = np.stack([grad[:, 0, 0], grad[:, 0, 1], grad[:, 0, 2],
                       hess[:, 0, 0, 0], hess[:, 0, 0, 2], val[:, 0]])
    phi0 = 0.0 if target.phi0 is None else target.phi0
    rhs = np.array([0.0, 0.0, 0.0, target.curvature, 0.0, phi0])
    rhs -= np.array([fgrad[0, 0], fgrad[0, 1], fgrad[0, 2], fhess[0, 0, 0], fhess[0, 0, 2], fval[0]])
    scale = row_scale(target.curvature, model.length_scale)
    return ConstraintRows(matrix * scale[:, None], rhs * scale, scale)


@dataclass(frozen=True)
class StepSolution:
    voltages: np.ndarray
    residuals: np.ndarray  # scaled, unweighted, one per row
    objective: float
    active: np.ndarray  # electrodes sitting on a box edge


def solve_step(rows: ConstraintRows, weights, boxes, previous, regularization: float = 1e-12,
               step: int | None = None) -> StepSolution:
    """Minimize sum_k w_k r_k^2 + eps * |U - previous|^2 subject to box bounds.

    Bounded-variable least squares with a fixed pivoting order, so the
    result is deterministic.  Electrodes with a degenerate box are pinned.
    """
    weights = np.asarray(weights, dtype=float)
    n = rows.matrix.shape[1]
    lo = np.broadcast_to(np.asarray(boxes[0], dtype=float), (n,))
    hi = np.broadcast_to(np.asarray(boxes[1], dtype=float), (n,))
    previous = np.asarray(previous, dtype=float)
    if np.any(weights < 0):
        raise InvalidArgument("row weights must be nonnegative")
    bad = np.flatnonzero(lo > hi)
    if bad.size:
        j = int(bad[0])
        raise InfeasibleStep(f"step {step}: empty voltage box for electrode {j} "
                             f"[{lo[j]:.6g}, {hi[j]:.6g}]", step=step, electrode=j)

    finite = np.isfinite(lo) & np.isfinite(hi)
    # expand around the in-box point nearest the previous solution so an
    # already optimal previous comes back unchanged up to rounding
    center = np.clip(previous, lo, hi)
    half = np.where(finite, 0.5 * (hi - lo), 1.0)
    pinned = half == 0
    free = ~pinned
    sw = np.sqrt(weights)

    base = rows.rhs - rows.matrix @ center
    u = center.copy()
    if np.any(free):
        a_free = rows.matrix[:, free] * half[free]
        reg = np.sqrt(regularization) * np.diag(half[free])
        a = np.vstack([sw[:, None] * a_free, reg])
        b = np.concatenate([sw * base, np.sqrt(regularization) * (previous - center)[free]])
        vlo = ((lo - center) / half)[free]
        vhi = ((hi - center) / half)[free]
        if np.all(np.isinf(vlo)) and np.all(np.isinf(vhi)):
            v = np.linalg.lstsq(a, b, rcond=None)[0]
        else:
            v = lsq_linear(a, b, bounds=(vlo, vhi), method="bvls", tol=1e-14,
                           lsmr_tol=None, max_iter=None).x
            v = np.clip(v, vlo, vhi)
        u[free] = center[free] + half[free] * v
    u = np.clip(u, lo, hi)

    def objective(x):
        r = rows.matrix @ x - rows.rhs
        return float(np.sum(weights * r ** 2) + regularization * np.sum((x - previous) ** 2)), r

    obj, res = objective(u)
    obj_c, res_c = objective(center)
    if obj_c <= obj:
        # the solver only wandered along a flat direction
        u, obj, res = center, obj_c, res_c
    active = (u <= lo) | (u >= hi)
    return StepSolution(u, res, obj, active)


@dataclass(frozen=True)
class MicromotionOffsets:
    start: np.ndarray
    end: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.start, dtype=float)
        e = np.asarray(self.end, dtype=float)
        if s.shape != e.shape or s.ndim != 1:
            raise InvalidArgument("offset sets must be equal-length vectors")
        object.__setattr__(self, "start", s)
        object.__setattr__(self, "end", e)

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros(n), np.zeros(n))


def interpolate_offsets(offsets: MicromotionOffsets, i: int, L: int, fraction: float | None = None):
    """Offset voltages at step ``i``; linear between the endpoint sets.

    By default the weight is i / L.  Pass ``fraction`` to interpolate by
    the fraction of the path already covered instead.
    """
    if not 0 <= i <= L:
        raise InvalidArgument(f"step {i} outside [0, {L}]")
    if fraction is None:
        if i == 0:
            return offsets.start.copy()
        if i == L:
            return offsets.end.copy()
        fraction = i / L
    return offsets.start + fraction * (offsets.end - offsets.start)


@dataclass(frozen=True)
class SynthesisConfig:
    slew: float = 0.2
    voltage_bounds: tuple = (-10.0, 10.0)
    row_weights: tuple = DEFAULT_ROW_WEIGHTS
    tie_weight: float = 0.0
    loop_weight_end: float = 1e-2
    loop_weight_mid: float = 1e-4
    regularization: float = 1e-12
    phi0: float | None = None
    settle_steps: int | None = None

    def __post_init__(self):
        if not self.slew >= 0:
            raise InvalidArgument("slew limit must be nonnegative")
        lo, hi = self.voltage_bounds
        if not lo < hi:
            raise InvalidArgument("voltage bounds must satisfy lo < hi")


@dataclass(frozen=True)
class RampLeg:
    source: np.ndarray     # U~_i, shape (n, E)
    electrode: np.ndarray  # U_i including offsets, shape (n, E)
    ideal: np.ndarray      # U_i without offsets
    positions: np.ndarray  # target positions, shape (n, 3)
    residuals: np.ndarray  # scaled constraint residuals per step, shape (n, 6)

    @property
    def initial_state(self):
        return self.electrode[0]


@dataclass(frozen=True)
class VoltageRamp:
    forward: RampLeg
    backward: RampLeg
    dt: float
    slew: float
    n_steps: int
    metadata: dict = field(default_factory=dict)

    @property
    def n_electrodes(self) -> int:
        return self.forward.source.shape[1]

    def config_hash(self) -> str:
        return self.metadata.get("config_hash", "")


def _loop_weight(i, L, end, mid):
    """Geometric decay from ``end`` at both endpoints to ``mid`` halfway."""
    if L == 0:
        return end
    d = min(i, L - i) / (L / 2)
    d = min(max(d, 0.0), 1.0)
    return end * (mid / end) ** d


def static_solution(model, position, curvature, phi0, weights, bounds, previous, reg, step=None):
    target = ConstraintTarget(position, curvature, phi0, weights)
    rows = constraint_rows(model, target)
    return solve_step(rows, target.row_weights, bounds, previous, reg, step), rows


def _ideal_path(model, positions, curvature, phi0, cfg, offsets_at):
    """Min-norm static solution at every position, each seeded by its neighbour."""
    n, E = len(positions), model.n_electrodes
    path = np.empty((n, E))
    prev = np.zeros(E)
    glo, ghi = cfg.voltage_bounds
    last_key = None
    for i, r in enumerate(positions):
        off = offsets_at(i)
        key = (tuple(r), tuple(off))
        if key == last_key:
            # identical target: keep the same voltages rather than re-seeding
            path[i] = prev
            continue
        last_key = key
        sol, _ = static_solution(model, r, curvature, phi0, cfg.row_weights,
                                 (glo - off, ghi - off), prev, cfg.regularization, i)
        if i == 0:
            # the starting point has no neighbour: settle it onto itself so a
            # later solve seeded with it returns it unchanged
            for _ in range(3):
                sol, _ = static_solution(model, r, curvature, phi0, cfg.row_weights,
                                         (glo - off, ghi - off), sol.voltages,
                                         cfg.regularization, i)
        path[i] = prev = sol.voltages
    return path


def _synthesize_leg(model, positions, curvature, phi0, spec, cfg, offsets_at, reference,
                    init_source, loop_target=None, L=None):
    """Step through one direction with filter-aware boxes."""
    n, E = len(positions), model.n_electrodes
    glo, ghi = cfg.voltage_bounds
    k = LD(spec.b[1]) / LD(spec.a[0])
    state = steady_state(spec, np.asarray(init_source, dtype=LD))
    electrode = np.empty((n, E), dtype=LD)
    source = np.empty((n, E), dtype=LD)
    residuals = np.zeros((n, 6))
    electrode[0] = state.free_output(spec)
    rows0 = constraint_rows(model, ConstraintTarget(positions[0], curvature, phi0, cfg.row_weights))
    residuals[0] = rows0.matrix @ np.asarray(electrode[0] - offsets_at(0), dtype=float) - rows0.rhs

    slew = LD(cfg.slew)
    for i in range(1, n):
        off = offsets_at(i)
        lo, hi = reachable_interval(spec, state, slew, off, (glo, ghi))
        last = state.last_source
        _, nxt = state.push(spec, last)
        free_out = nxt.free_output(spec) - k * last  # output with zero new source

        target = ConstraintTarget(positions[i], curvature, phi0, cfg.row_weights)
        rows = constraint_rows(model, target)
        mats = [rows.matrix]
        rhss = [rows.rhs]
        wts = [target.row_weights]
        if cfg.tie_weight > 0:
            # k (U~ - U_total) with U~ = (U_total - free_out) / k
            mats.append(np.eye(E) * float(1 - k))
            rhss.append(np.asarray(free_out - (1 - k) * LD(1) * np.asarray(off, dtype=LD), dtype=float))
            wts.append(np.full(E, cfg.tie_weight))
        if loop_target is not None:
            mats.append(np.eye(E))
            rhss.append(loop_target[min(i, len(loop_target) - 1)])
            lw = _loop_weight(min(i, L), L, cfg.loop_weight_end, cfg.loop_weight_mid)
            wts.append(np.full(E, lw))
        stacked = ConstraintRows(np.vstack(mats), np.concatenate(rhss),
                                 np.ones(sum(len(r) for r in rhss)))
        box_lo = np.asarray(lo, dtype=float)
        box_hi = np.asarray(hi, dtype=float)
        # float rounding may flip a zero-width box
        box_hi = np.maximum(box_hi, box_lo)
        sol = solve_step(stacked, np.concatenate(wts), (box_lo, box_hi), reference[i],
                         cfg.regularization, i)
        s = back_solve(spec, state, np.asarray(sol.voltages, dtype=LD), np.asarray(off, dtype=LD))
        s = np.clip(s, last - slew, last + slew)
        s = np.clip(s, LD(glo), LD(ghi))
        source[i - 1] = s
        u, state = state.push(spec, s)
        electrode[i] = state.free_output(spec)
        residuals[i] = rows.matrix @ np.asarray(electrode[i] - off, dtype=float) - rows.rhs
    # hold the last source so the electrode settles where it is
    source[n - 1] = source[n - 2] if n > 1 else electrode[0]
    return source, electrode, residuals


def synthesize(model: TrapModel, plan: TransportPlan, spec: FilterSpec,
               offsets: MicromotionOffsets | None = None,
               config: SynthesisConfig | None = None) -> VoltageRamp:
    """Build forward (A to B) and backward (B to A) ramps.

    The ideal-trap voltages are first solved without dynamics; the second
    pass walks the trajectory keeping every electrode inside its reachable
    interval and pulls towards the ideal path.  The backward leg starts from
    the settled end of the forward leg and carries soft rows that favour the
    forward voltages at the same position, strongest near the endpoints.
    """
    cfg = config or SynthesisConfig()
    if not np.isclose(plan.dt, spec.dt, rtol=1e-12, atol=0):
        raise InvalidArgument(f"plan step {plan.dt} does not match filter step {spec.dt}")
    E = model.n_electrodes
    offsets = offsets or MicromotionOffsets.zeros(E)
    if len(offsets.start) != E:
        raise InvalidArgument("offset vectors do not match electrode count")
    L = plan.n_steps
    settle = spec.n_a + 1 if cfg.settle_steps is None else int(cfg.settle_steps)
    curvature = curvature_target(plan.omega_x, model.mass, model.charge)
    glo, ghi = cfg.voltage_bounds

    fwd_pos = np.vstack([plan.positions, np.repeat(plan.positions[-1:], settle, axis=0)])
    bwd_pos = np.vstack([plan.positions[::-1], np.repeat(plan.positions[:1], settle, axis=0)])

    def frac_fwd(i):
        return float(plan.fraction(min(i, L)))

    def off_fwd(i):
        return interpolate_offsets(offsets, min(i, L), L, frac_fwd(i))

    def off_bwd(i):
        j = L - min(i, L)
        return interpolate_offsets(offsets, j, L, frac_fwd(j))

    phi0 = cfg.phi0
    if phi0 is None:
        w0 = np.array(cfg.row_weights)
        w0[5] = 0.0
        off0 = off_fwd(0)
        sol0, _ = static_solution(model, plan.positions[0], curvature, None, w0,
                                  (glo - off0, ghi - off0), np.zeros(E), cfg.regularization, 0)
        phi0 = float(model.probe(sol0.voltages, plan.positions[0]).value)

    ideal_f = _ideal_path(model, fwd_pos, curvature, phi0, cfg, off_fwd)
    # same positions, same offsets: the reversed forward path is an exact
    # solution for the way back and keeps the loop closed
    ideal_b = np.vstack([ideal_f[:L + 1][::-1], np.repeat(ideal_f[:1], settle, axis=0)])
    start = ideal_f[0] + off_fwd(0)
    if np.any(start < glo) or np.any(start > ghi):
        raise VoltageBoundError("initial voltages outside the global bounds")

    src_f, el_f, res_f = _synthesize_leg(model, fwd_pos, curvature, phi0, spec, cfg, off_fwd,
                                         ideal_f, start)
    loop_target = np.array([el_f[min(L - i, L)] - off_fwd(min(L - i, L)) if i <= L
                            else el_f[0] - off_fwd(0) for i in range(len(bwd_pos))], dtype=float)
    src_b, el_b, res_b = _synthesize_leg(model, bwd_pos, curvature, phi0, spec, cfg, off_bwd,
                                         ideal_b, src_f[-1], loop_target, L)

    def leg(src, el, res, pos, off_at):
        # recompute the electrode trace from the final sources for exact consistency
        init = steady_state(spec, src[0] * 0 + el[0])
        u = apply_forward(spec, src, init)
        offs = np.array([off_at(i) for i in range(len(pos))])
        s64, u64 = np.asarray(src, dtype=float), np.asarray(u, dtype=float)
        if np.any(s64 < glo - 1e-12) or np.any(s64 > ghi + 1e-12):
            raise VoltageBoundError("synthesized source voltages exceed the global bounds")
        for a in (s64, u64):
            a.setflags(write=False)
        return RampLeg(s64, u64, u64 - offs, pos, res)

    meta = {
        "trajectory": {"distance": plan.distance, "duration": plan.duration, "dt": plan.dt,
                       "n_steps": L, "profile": plan.profile, "omega_x": plan.omega_x},
        "filter": spec.to_dict(),
        "config": asdict(cfg) | {"phi0": phi0},
        "settle_steps": settle,
        "offsets": {"start": offsets.start.tolist(), "end": offsets.end.tolist()},
    }
    meta["config_hash"] = config_hash(meta)
    logger.info("synthesized ramp: %d steps + %d settle, %d electrodes", L, settle, E)
    return VoltageRamp(leg(src_f, el_f, res_f, fwd_pos, off_fwd),
                       leg(src_b, el_b, res_b, bwd_pos, off_bwd),
                       plan.dt, cfg.slew, L, meta)


def config_hash(obj) -> str:
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=_json_default)
    return hashlib.sha256(text.encode()).hexdigest()


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"cannot serialize {type(o)}")


def naive_linear_ramp(model: TrapModel, plan: TransportPlan, spec: FilterSpec,
                      config: SynthesisConfig | None = None) -> VoltageRamp:
    """Comparison ramp without filter awareness.

    Endpoint voltages are the static solutions at A and B; the source moves
    every electrode linearly from one to the other at the slew limit of the
    fastest electrode, then holds.  Same sample count as :func:`synthesize`.
    """
    cfg = config or SynthesisConfig()
    E = model.n_electrodes
    L = plan.n_steps
    settle = spec.n_a + 1 if cfg.settle_steps is None else int(cfg.settle_steps)
    curvature = curvature_target(plan.omega_x, model.mass, model.charge)
    glo, ghi = cfg.voltage_bounds
    w0 = np.array(cfg.row_weights)
    w0[5] = 0.0
    ua, _ = static_solution(model, plan.positions[0], curvature, None, w0, (glo, ghi),
                            np.zeros(E), cfg.regularization)
    phi0 = float(model.probe(ua.voltages, plan.positions[0]).value) if cfg.phi0 is None else cfg.phi0
    path = _ideal_path(model, np.stack([plan.positions[0], plan.positions[-1]]), curvature,
                       phi0, cfg, lambda i: np.zeros(E))
    n = L + 1 + settle

    def leg(u_from, u_to, pos_from, pos_to):
        span = np.max(np.abs(u_to - u_from))
        n_move = max(1, int(np.ceil(span / cfg.slew))) if cfg.slew > 0 else 1
        frac = np.clip(np.arange(n) / n_move, 0, 1)
        src = u_from + frac[:, None] * (u_to - u_from)
        src[0] = u_from
        src = np.vstack([src[1:], src[-1:]])
        u = np.asarray(apply_forward(spec, src, steady_state(spec, u_from)), dtype=float)
        pos = np.tile(pos_to, (n, 1))
        pos[0] = pos_from
        return RampLeg(src, u, u, pos, np.zeros((n, 6)))

    fw = leg(path[0], path[1], plan.positions[0], plan.positions[-1])
    bw = leg(path[1], path[0], plan.positions[-1], plan.positions[0])
    meta = {"kind": "naive-linear", "settle_steps": settle,
            "trajectory": {"distance": plan.distance, "duration": plan.duration, "dt": plan.dt,
                           "n_steps": L, "profile": plan.profile, "omega_x": plan.omega_x}}
    return VoltageRamp(fw, bw, plan.dt, cfg.slew, L, meta)


def extend_ramp(ramp: VoltageRamp, spec: FilterSpec, hold_steps: int) -> VoltageRamp:
    """Append ``hold_steps`` samples of constant source to both legs."""
    def ext(leg: RampLeg):
        src = np.vstack([leg.source, np.repeat(leg.source[-1:], hold_steps, axis=0)])
        u = np.asarray(apply_forward(spec, src, steady_state(spec, leg.electrode[0])), dtype=float)
        off = leg.electrode - leg.ideal
        off = np.vstack([off, np.repeat(off[-1:], hold_steps, axis=0)])
        pos = np.vstack([leg.positions, np.repeat(leg.positions[-1:], hold_steps, axis=0)])
        res = np.vstack([leg.residuals, np.repeat(leg.residuals[-1:], hold_steps, axis=0)])
        return RampLeg(src, u, u - off, pos, res)
    return VoltageRamp(ext(ramp.forward), ext(ramp.backward), ramp.dt, ramp.slew,
                       ramp.n_steps, dict(ramp.metadata))


@dataclass(frozen=True)
class DwellPattern:
    """Ramsey-sequence timing: waits split equally between A and B keep the
    total precession time fixed for both transport counts."""

    precession_time: float = 69.44e-3
    transports_lo: int = 2
    transports_hi: int = 4000


@dataclass
class RampDiagnostics:
    max_position_error: float
    max_frequency_error: float
    max_cross_term: float
    slew_violations: int
    loop_closure_error: float
    mean_position_asymmetry: float
    unconverged_steps: list
    minima_forward: np.ndarray
    minima_backward: np.ndarray

    def to_dict(self):
        return {
            "max_position_error": self.max_position_error,
            "max_frequency_error": self.max_frequency_error,
            "max_cross_term": self.max_cross_term,
            "slew_violations": self.slew_violations,
            "loop_closure_error": self.loop_closure_error,
            "mean_position_asymmetry": self.mean_position_asymmetry,
            "unconverged_steps": list(self.unconverged_steps),
        }


def _leg_minima(model, voltages, targets, label, flagged):
    n = len(voltages)
    minima = np.empty((n, 3))
    omega = np.empty(n)
    cross = np.empty(n)
    guess = targets[0]
    for i in range(n):
        r, p, ok = find_minimum(model, voltages[i], guess)
        if not ok:
            flagged.append(f"{label}:{i}")
        minima[i] = r
        curv = p.hessian[0, 0] * np.sign(model.charge)
        omega[i] = np.sqrt(abs(model.charge) * curv / model.mass) if curv > 0 else np.nan
        cross[i] = abs(p.hessian[0, 2])
        guess = r
    return minima, omega, cross


def count_slew_violations(leg: RampLeg, slew: float, atol: float = 1e-12) -> int:
    src = np.vstack([leg.electrode[:1], leg.source])  # steady start: U~_{-1} = U_0
    return int(np.sum(np.abs(np.diff(src, axis=0)) > slew + atol))


def mean_position_asymmetry(minima_fwd, minima_bwd, dt, dwell: DwellPattern) -> float:
    """Difference of the time-averaged axial position between the high and
    low transport counts of the dwell pattern.

    Each round trip is a forward leg followed by a backward leg; the
    remaining precession time is spent at rest, half at A and half at B.
    """
    x = np.concatenate([minima_fwd[:, 0], minima_bwd[1:, 0]])
    x_mid = 0.5 * (minima_fwd[0, 0] + minima_fwd[-1, 0])
    leg_time = (len(minima_fwd) - 1) * dt
    for m in (dwell.transports_lo, dwell.transports_hi):
        if m * leg_time > dwell.precession_time:
            raise InvalidArgument(f"{m} transports do not fit into the precession time")
    integral = np.trapezoid(x - x_mid, dx=dt)  # one round trip
    # rest positions sit symmetrically about x_mid only up to the settle error
    rest = 0.5 * ((minima_fwd[-1, 0] - x_mid) + (minima_bwd[-1, 0] - x_mid))

    def mean(m):
        wait = dwell.precession_time - m * leg_time
        return x_mid + (m / 2 * integral + wait * rest) / dwell.precession_time

    return float(mean(dwell.transports_hi) - mean(dwell.transports_lo))


def verify_ramp(ramp: VoltageRamp, model: TrapModel, plan: TransportPlan,
                dwell: DwellPattern | None = None, actual_filter: FilterSpec | None = None
                ) -> RampDiagnostics:
    """Audit a ramp by re-probing the potential at every sample.

    The potential minimum is located by damped Newton descent from the
    target position.  With ``actual_filter`` the electrode voltages are
    recomputed from the source sequence through that filter, which models
    electronics that differ from the ones the ramp was compensated for.
    """
    if ramp.n_electrodes != model.n_electrodes:
        raise InvalidArgument("ramp and model electrode counts differ")
    dwell = dwell or DwellPattern()
    flagged: list = []

    def electrode_of(leg):
        if actual_filter is None:
            return leg.electrode
        init = steady_state(actual_filter, leg.electrode[0])
        return np.asarray(apply_forward(actual_filter, leg.source, init), dtype=float)

    u_f, u_b = electrode_of(ramp.forward), electrode_of(ramp.backward)
    min_f, om_f, cr_f = _leg_minima(model, u_f, ramp.forward.positions, "forward", flagged)
    min_b, om_b, cr_b = _leg_minima(model, u_b, ramp.backward.positions, "backward", flagged)

    pos_err = max(np.linalg.norm(min_f - ramp.forward.positions, axis=1).max(),
                  np.linalg.norm(min_b - ramp.backward.positions, axis=1).max())
    om = np.concatenate([om_f, om_b])
    freq_err = float(np.nanmax(np.abs(om / plan.omega_x - 1))) if np.all(np.isfinite(om)) else np.inf
    cross = float(max(cr_f.max(), cr_b.max()))
    slew = count_slew_violations(ramp.forward, ramp.slew) + count_slew_violations(ramp.backward, ramp.slew)
    loop = max(np.abs(u_b[0] - u_f[-1]).max(), np.abs(u_f[0] - u_b[-1]).max(),
               np.abs(ramp.forward.source[-1] - u_f[-1]).max(),
               np.abs(ramp.backward.source[-1] - u_b[-1]).max())
    asym = mean_position_asymmetry(min_f, min_b, ramp.dt, dwell)
    return RampDiagnostics(float(pos_err), freq_err, cross, slew, float(loop), asym,
                           flagged, min_f, min_b)
