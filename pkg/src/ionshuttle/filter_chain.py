"""Discrete model of the low-pass electronics between voltage source and electrode.

The electrode voltage U follows the source voltage U~ through

    sum_{n=0}^{n_a} a_n U_{i-n} = sum_{n=1}^{n_b} b_n U~_{i-n}

so U_i never depends on U~_i. Time-domain arithmetic runs in
``np.longdouble``: the inverse divides by b_1, which is of order 1e-5 for a
63 kHz chain sampled at 12.5 MHz, and double precision would leave
reachability checks at the 1e-11 V level.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, signal

from .errors import InvalidArgument

logger = logging.getLogger(__name__)

LD = np.longdouble
METHODS = ("matched", "bilinear", "zoh")


@dataclass(frozen=True)
class RCStage:
    R: float
    C: float

    @property
    def tau(self) -> float:
        return self.R * self.C


@dataclass(frozen=True)
class AnalogChain:
    """Buffered cascade of first-order RC stages ending on the trap capacitance.

    The trap capacitance is charged through the resistor of the last stage,
    giving one extra pole with time constant R_last * C_trap.  Stages are
    treated as unloaded (ideal buffers between them).
    """

    stages: tuple
    trap_capacitance: float

    def __post_init__(self):
        if len(self.stages) < 1:
            raise InvalidArgument("analog chain needs at least one RC stage")
        stages = tuple(s if isinstance(s, RCStage) else RCStage(*s) for s in self.stages)
        for s in stages:
            if not (s.R > 0 and s.C > 0):
                raise InvalidArgument(f"RC stage values must be positive, got R={s.R}, C={s.C}")
        if not self.trap_capacitance > 0:
            raise InvalidArgument("trap capacitance must be positive")
        object.__setattr__(self, "stages", stages)

    @property
    def time_constants(self) -> np.ndarray:
        taus = [s.tau for s in self.stages]
        taus.append(self.stages[-1].R * self.trap_capacitance)
        return np.array(taus)

    def magnitude(self, f):
        """Continuous |G(2 pi i f)|."""
        w = 2 * np.pi * np.asarray(f, dtype=float)
        return np.prod([1 / np.sqrt(1 + (w * t) ** 2) for t in self.time_constants], axis=0)

    def cutoff(self) -> float:
        """Composite -3 dB frequency of the continuous chain."""
        fmax = 10 / (2 * np.pi * self.time_constants.min())
        return optimize.brentq(lambda f: self.magnitude(f) - 2 ** -0.5, 1e-9 * fmax, fmax, xtol=1e-9)


def default_chain(cutoff: float = 63.2e3, resistance: float = 1e3) -> AnalogChain:
    """Three equal RC stages and a trap pole one octave above them, scaled so
    the composite -3 dB point sits at ``cutoff``."""
    def mag(fp):
        x = cutoff / fp
        return (1 + x ** 2) ** -1.5 * (1 + (x / 2) ** 2) ** -0.5 - 2 ** -0.5

    fp = optimize.brentq(mag, cutoff, 100 * cutoff, xtol=1e-12)
    tau = 1 / (2 * np.pi * fp)
    c = tau / resistance
    return AnalogChain(tuple(RCStage(resistance, c) for _ in range(3)), c / 2)


@dataclass(frozen=True)
class FilterSpec:
    """Recursion coefficients, normalized so a[0] = 1; b[0] is always 0."""

    a: np.ndarray
    b: np.ndarray
    dt: float
    method: str = "matched"
    name: str = "filter"

    def __post_init__(self):
        a = np.asarray(self.a, dtype=float)
        b = np.asarray(self.b, dtype=float)
        if a.ndim != 1 or b.ndim != 1 or len(a) < 2 or len(b) < 2:
            raise InvalidArgument("filter coefficients must be 1-D with order >= 1")
        if a[0] == 0:
            raise InvalidArgument("a_0 must be nonzero")
        if b[0] != 0:
            raise InvalidArgument("b_0 must be zero (one-step delay)")
        if b[1] == 0:
            raise InvalidArgument("b_1 must be nonzero for the recursion to be invertible")
        if not self.dt > 0:
            raise InvalidArgument("sample period must be positive")
        gain = b.sum() / a.sum()
        if abs(gain - 1) > 1e-9:
            raise InvalidArgument(f"static gain must be 1, got {gain!r}")
        a.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)

    @property
    def n_a(self) -> int:
        return len(self.a) - 1

    @property
    def n_b(self) -> int:
        return len(self.b) - 1

    @property
    def b1(self) -> float:
        return float(self.b[1])

    def response(self, f):
        """Complex frequency response on the unit circle."""
        z1 = np.exp(-2j * np.pi * np.asarray(f, dtype=float) * self.dt)
        num = np.polyval(self.b[::-1], z1)
        den = np.polyval(self.a[::-1], z1)
        return num / den

    def cutoff(self) -> float:
        """-3 dB frequency of the discrete filter."""
        nyq = 0.5 / self.dt
        return optimize.brentq(lambda f: abs(self.response(f)) - 2 ** -0.5,
                               1e-9 * nyq, 0.999 * nyq, xtol=1e-9)

    def to_dict(self):
        return {"a": self.a.tolist(), "b": self.b.tolist(), "dt": self.dt,
                "method": self.method, "name": self.name}


def discretize(chain: AnalogChain, dt: float, method: str = "matched") -> FilterSpec:
    """Map the analog chain to recursion coefficients.

    ``matched``: poles exp(-dt/tau), numerator a pure one-sample delay scaled
    for unit static gain.  ``bilinear``: Tustin transform with one of its
    (1 + z^-1)/2 numerator factors replaced by z^-1 so b_0 = 0.  ``zoh``:
    zero-order-hold equivalent.  All give n_a = n_b = number of poles.
    """
    if not dt > 0:
        raise InvalidArgument("sample period must be positive")
    taus = chain.time_constants
    n = len(taus)
    if method == "matched":
        a = np.poly(np.exp(-dt / taus))
        b = np.zeros(n + 1)
        b[1] = a.sum()
    elif method in ("bilinear", "zoh"):
        den = np.array([1.0])
        for t in taus:
            den = np.polymul(den, [t, 1.0])
        if method == "bilinear":
            bz, a = signal.bilinear([1.0], den, 1 / dt)
            k = bz[0]
            b = np.r_[0.0, 2 * k * np.poly(-np.ones(n - 1))]
        else:
            bz, a, _ = signal.cont2discrete(([1.0], den), dt, method="zoh")
            b = np.ravel(bz)
            b[0] = 0.0
        b = b * a.sum() / b.sum()
    else:
        raise InvalidArgument(f"unknown discretization {method!r}; choose from {METHODS}")
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float) / a[0]
    a = a / a[0]
    return FilterSpec(a, b, float(dt), method, f"{n}-pole {method}")


def bode(spec: FilterSpec, f):
    """Magnitude in dB and phase in degrees of the discrete filter at ``f`` (Hz)."""
    f = np.asarray(f, dtype=float)
    nyq = 0.5 / spec.dt
    if np.any(f <= 0) or np.any(f >= nyq):
        raise InvalidArgument(f"frequencies must lie in (0, {nyq}) Hz")
    h = spec.response(f)
    phase = np.degrees(np.unwrap(np.atleast_1d(np.angle(h)))).reshape(np.shape(h))
    return {"magnitude": 20 * np.log10(np.abs(h)), "phase": phase}


@dataclass(frozen=True)
class FilterState:
    """Recursion history, newest first.

    ``input_history[k]`` is U~_{-1-k} and ``output_history[k]`` is U_{-1-k}.
    A trailing axis may carry one channel per electrode.
    """

    input_history: np.ndarray
    output_history: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "input_history", np.asarray(self.input_history, dtype=LD))
        object.__setattr__(self, "output_history", np.asarray(self.output_history, dtype=LD))

    def check(self, spec: FilterSpec):
        if len(self.input_history) != spec.n_b or len(self.output_history) != spec.n_a:
            raise InvalidArgument(
                f"history lengths ({len(self.input_history)}, {len(self.output_history)}) "
                f"do not match filter orders ({spec.n_b}, {spec.n_a})")

    def free_output(self, spec: FilterSpec):
        """Next electrode voltage, already fixed by the history."""
        b = spec.b[1:].astype(LD)
        a = spec.a.astype(LD)
        acc = np.tensordot(b, self.input_history, axes=(0, 0))
        acc -= np.tensordot(a[1:], self.output_history, axes=(0, 0))
        return acc / a[0]

    def push(self, spec: FilterSpec, source):
        """Emit the next output and return ``(output, new_state)`` after applying ``source``."""
        u = self.free_output(spec)
        s = np.asarray(source, dtype=LD)
        inputs = np.concatenate([s[None], self.input_history[:-1]])
        outputs = np.concatenate([np.asarray(u)[None], self.output_history[:-1]])
        return u, FilterState(inputs, outputs)

    @property
    def last_source(self):
        return self.input_history[0]


def steady_state(spec: FilterSpec, value) -> FilterState:
    """History of a filter that has held ``value`` (scalar or per-electrode) forever."""
    v = np.asarray(value, dtype=LD)
    return FilterState(np.broadcast_to(v, (spec.n_b,) + v.shape).copy(),
                       np.broadcast_to(v, (spec.n_a,) + v.shape).copy())


def apply_forward(spec: FilterSpec, source, init: FilterState):
    """Electrode voltages for a source sequence (axis 0 is time).

    U[0] is set by the initial history; source[i] first affects U[i+1].
    Returned in ``np.longdouble``.
    """
    init.check(spec)
    src = np.asarray(source, dtype=LD)
    if len(src) == 0:
        raise InvalidArgument("source sequence is empty")
    na, nb = spec.n_a, spec.n_b
    a = spec.a.astype(LD)
    b = spec.b.astype(LD)
    s_all = np.concatenate([init.input_history[::-1], src])
    u_all = np.concatenate([init.output_history[::-1], np.zeros_like(src)])
    for i in range(len(src)):
        ui = na + i
        si = nb + i
        acc = 0
        for k in range(1, nb + 1):
            acc = acc + b[k] * s_all[si - k]
        for k in range(1, na + 1):
            acc = acc - a[k] * u_all[ui - k]
        u_all[ui] = acc / a[0]
    return u_all[na:]


def precompensate(spec: FilterSpec, target, init: FilterState, atol: float = 1e-9):
    """Source sequence whose filtered output is ``target``.

    ``target[0]`` must equal the free output of ``init``.  The last source
    value holds the electrode at ``target[-1]`` for one more step.
    """
    init.check(spec)
    tgt = np.asarray(target, dtype=LD)
    if len(tgt) == 0:
        raise InvalidArgument("target sequence is empty")
    u0 = init.free_output(spec)
    if np.any(np.abs(tgt[0] - u0) > atol * np.maximum(1, np.abs(u0))):
        raise InvalidArgument("target[0] is inconsistent with the initial filter state")
    na, nb = spec.n_a, spec.n_b
    a = spec.a.astype(LD)
    b = spec.b.astype(LD)
    n = len(tgt)
    u_all = np.concatenate([init.output_history[::-1], tgt, tgt[-1:]])
    s_all = np.concatenate([init.input_history[::-1], np.zeros_like(tgt)])
    for i in range(1, n + 1):
        # solve for the source one step behind output index i
        acc = 0
        for k in range(0, na + 1):
            acc = acc + a[k] * u_all[na + i - k]
        for k in range(2, nb + 1):
            acc = acc - b[k] * s_all[nb + i - k]
        s_all[nb + i - 1] = acc / b[1]
    return s_all[nb:]


def reachable_interval(spec: FilterSpec, state: FilterState, delta, offset=0.0,
                       source_bounds=None):
    """Range of the next controllable electrode voltage.

    The source may move by at most ``delta`` from its last value (optionally
    clipped to ``source_bounds``).  Both bounds are shifted by ``-offset``
    so they apply to the offset-free (ideal-trap) voltage.  Returns
    ``(lo, hi)`` in ``np.longdouble``.
    """
    delta = np.asarray(delta, dtype=LD)
    if np.any(delta < 0):
        raise InvalidArgument("slew limit must be nonnegative")
    last = state.last_source
    s_lo, s_hi = last - delta, last + delta
    if source_bounds is not None:
        s_lo = np.maximum(s_lo, LD(source_bounds[0]))
        s_hi = np.minimum(s_hi, LD(source_bounds[1]))
    _, nxt = state.push(spec, last)
    base = nxt.free_output(spec) - LD(spec.b[1]) * last / LD(spec.a[0])
    k = LD(spec.b[1]) / LD(spec.a[0])
    off = np.asarray(offset, dtype=LD)
    u1 = base + k * s_lo - off
    u2 = base + k * s_hi - off
    return np.minimum(u1, u2), np.maximum(u1, u2)


def back_solve(spec: FilterSpec, state: FilterState, target, offset=0.0):
    """Source value that drives the next controllable output to ``target + offset``."""
    last = state.last_source
    _, nxt = state.push(spec, last)
    base = nxt.free_output(spec) - LD(spec.b[1]) * last / LD(spec.a[0])
    u = np.asarray(target, dtype=LD) + np.asarray(offset, dtype=LD)
    return (u - base) * LD(spec.a[0]) / LD(spec.b[1])
