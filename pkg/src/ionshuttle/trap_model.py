"""Electrostatic model of a segmented linear Paul trap.

The total potential is the voltage-weighted sum of per-electrode basis
potentials plus fixed contributions (the rf pseudopotential and optional
stray fields) that always enter with unit weight::

    phi(r) = sum_j U_j * phi_j(r) + phi_ps(r) + phi_stray(r)

Every basis can be evaluated together with its gradient and Hessian, so the
whole model is linear in the dc voltages.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.constants as const

from .errors import GridParseError, InvalidArgument, OutOfBoundsError

import logging
logger = logging.getLogger(__name__)

YB171_MASS = 170.936323 * const.atomic_mass
ELEMENTARY_CHARGE = const.e

GRID_FORMAT = "ionshuttle-basis-grid"
GRID_VERSION = 1


@dataclass(frozen=True)
class PotentialProbe:
    value: float
    gradient: np.ndarray
    hessian: np.ndarray


def _as_points(r):
    pts = np.asarray(r, dtype=float)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    if pts.shape[-1] != 3:
        raise InvalidArgument("positions must be 3-vectors")
    return pts, single


class GaussianBasis:
    """Analytic surrogate electrode.

    phi = U0 * exp(-(x - xc)^2 / (2 w^2)) * (1 + c_t (y^2 - z^2) / 2 + c_z z)

    ``curvature`` (c_t, 1/m^2) and ``tilt`` (c_z, 1/m) are relative to U0.
    Not a solution of the Laplace equation; it only has to give closed-form
    derivatives.
    """

    kind = "analytic-gaussian"

    def __init__(self, id: int, center: float, width: float, curvature: float = 0.0,
                 tilt: float = 0.0, reference_voltage: float = 1.0):
        if not width > 0:
            raise InvalidArgument(f"electrode {id}: width must be positive, got {width}")
        self.id = id
        self.center = float(center)
        self.width = float(width)
        self.curvature = float(curvature)
        self.tilt = float(tilt)
        self.reference_voltage = float(reference_voltage)

    def params(self):
        return (self.center, self.width, self.curvature, self.tilt, self.reference_voltage)

    def evaluate(self, points):
        v, g, h = _gaussian_block(np.array([self.params()]), points)
        return v[0], g[0], h[0]


def _gaussian_block(params, points):
    """Evaluate k Gaussian bases at n points at once; params rows are
    (center, width, curvature, tilt, reference_voltage)."""
    c, w, ct, cz, u0 = (params[:, k, None] for k in range(5))
    x, y, z = points[:, 0], points[:, 1], points[:, 2]
    w2 = w ** 2
    dx = x - c
    g = u0 * np.exp(-dx ** 2 / (2 * w2))
    g1 = -dx / w2 * g
    g2 = (dx ** 2 / w2 ** 2 - 1 / w2) * g
    p = 1 + ct * (y ** 2 - z ** 2) / 2 + cz * z
    py = ct * y
    pz = -ct * z + cz

    k, n = g.shape
    grad = np.empty((k, n, 3))
    grad[..., 0] = g1 * p
    grad[..., 1] = g * py
    grad[..., 2] = g * pz
    hess = np.zeros((k, n, 3, 3))
    hess[..., 0, 0] = g2 * p
    hess[..., 1, 1] = g * ct
    hess[..., 2, 2] = -g * ct
    hess[..., 0, 1] = hess[..., 1, 0] = g1 * py
    hess[..., 0, 2] = hess[..., 2, 0] = g1 * pz
    return g * p, grad, hess


class TiltBasis:
    """Uniform vertical field, phi = U0 * c_z * z (correction electrode)."""

    kind = "analytic-tilt"

    def __init__(self, id: int, tilt: float, reference_voltage: float = 1.0):
        self.id = id
        self.tilt = float(tilt)
        self.reference_voltage = float(reference_voltage)

    def evaluate(self, points):
        n = len(points)
        k = self.reference_voltage * self.tilt
        grad = np.zeros((n, 3))
        grad[:, 2] = k
        return k * points[:, 2], grad, np.zeros((n, 3, 3))


class HarmonicBasis:
    """Radially confining pseudopotential, phi = (k_y (y-y0)^2 + k_z (z-z0)^2) / 2."""

    kind = "analytic-harmonic"

    def __init__(self, curvature_y: float, curvature_z: float, y0: float = 0.0, z0: float = 0.0):
        self.id = -1
        self.curvature_y = float(curvature_y)
        self.curvature_z = float(curvature_z)
        self.y0 = float(y0)
        self.z0 = float(z0)
        self.reference_voltage = 1.0

    def evaluate(self, points):
        n = len(points)
        dy = points[:, 1] - self.y0
        dz = points[:, 2] - self.z0
        val = 0.5 * (self.curvature_y * dy ** 2 + self.curvature_z * dz ** 2)
        grad = np.zeros((n, 3))
        grad[:, 1] = self.curvature_y * dy
        grad[:, 2] = self.curvature_z * dz
        hess = np.zeros((n, 3, 3))
        hess[:, 1, 1] = self.curvature_y
        hess[:, 2, 2] = self.curvature_z
        return val, grad, hess


class GridBasis:
    """Basis potential sampled on a rectilinear grid.

    Derivative fields come from central differences one cell wide (one-sided
    second-order stencils on the faces) and all fields are interpolated
    trilinearly, so value, gradient and Hessian all converge at second order.
    """

    kind = "grid"

    def __init__(self, id: int, origin, spacing, values, reference_voltage: float = 1.0):
        values = np.asarray(values, dtype=float)
        spacing = np.asarray(spacing, dtype=float)
        if values.ndim != 3 or min(values.shape) < 3:
            raise InvalidArgument(f"electrode {id}: grid needs at least 3 nodes per axis")
        if spacing.shape != (3,) or not np.all(spacing > 0):
            raise InvalidArgument(f"electrode {id}: grid spacing must be positive on all axes")
        if not np.all(np.isfinite(values)):
            raise InvalidArgument(f"electrode {id}: grid field has non-finite values")
        self.id = id
        self.origin = np.asarray(origin, dtype=float)
        self.spacing = spacing
        self.values = values
        self.reference_voltage = float(reference_voltage)
        self.shape = values.shape

        grads = np.gradient(values, *spacing, edge_order=2)
        fields = [values, *grads]
        second = [np.gradient(g, *spacing, edge_order=2) for g in grads]
        for i, j in ((0, 0), (1, 1), (2, 2), (0, 1), (0, 2), (1, 2)):
            fields.append(0.5 * (second[i][j] + second[j][i]))
        self._fields = np.stack(fields)  # value, gx, gy, gz, xx, yy, zz, xy, xz, yz

    @property
    def upper(self):
        return self.origin + self.spacing * (np.array(self.shape) - 1)

    def evaluate(self, points):
        rel = (points - self.origin) / self.spacing
        hi = np.array(self.shape) - 1
        tol = 1e-9
        if np.any(rel < -tol) or np.any(rel > hi + tol):
            bad = points[np.any((rel < -tol) | (rel > hi + tol), axis=1)][0]
            raise OutOfBoundsError(f"position {bad} outside grid of electrode {self.id}")
        idx = np.clip(np.floor(rel).astype(int), 0, hi - 1)
        t = np.clip(rel - idx, 0.0, 1.0)
        out = 0.0
        for corner in range(8):
            o = np.array([(corner >> 2) & 1, (corner >> 1) & 1, corner & 1])
            wgt = np.prod(np.where(o, t, 1 - t), axis=1)
            ii = idx + o
            out = out + wgt * self._fields[:, ii[:, 0], ii[:, 1], ii[:, 2]]
        n = len(points)
        val = out[0]
        grad = out[1:4].T
        hess = np.empty((n, 3, 3))
        hess[:, 0, 0], hess[:, 1, 1], hess[:, 2, 2] = out[4], out[5], out[6]
        hess[:, 0, 1] = hess[:, 1, 0] = out[7]
        hess[:, 0, 2] = hess[:, 2, 0] = out[8]
        hess[:, 1, 2] = hess[:, 2, 1] = out[9]
        return val, grad, hess


@dataclass(frozen=True)
class TrapModel:
    bases: tuple
    pseudopotential: object
    mass: float = YB171_MASS
    charge: float = ELEMENTARY_CHARGE
    stray: tuple = ()
    length_scale: float = field(default=280e-6)

    def __post_init__(self):
        if len(self.bases) < 6:
            raise InvalidArgument("a trap model needs at least 6 dc electrode bases")
        object.__setattr__(self, "bases", tuple(self.bases))
        object.__setattr__(self, "stray", tuple(self.stray))
        # analytic electrodes are evaluated in one vectorized block
        gauss = [i for i, b in enumerate(self.bases) if isinstance(b, GaussianBasis)]
        object.__setattr__(self, "_gauss_index", np.array(gauss, dtype=int))
        object.__setattr__(self, "_gauss_params",
                           np.array([self.bases[i].params() for i in gauss]).reshape(-1, 5))
        object.__setattr__(self, "_other_index",
                           [i for i in range(len(self.bases)) if i not in set(gauss)])

    @property
    def n_electrodes(self) -> int:
        return len(self.bases)

    def dc_response(self, r):
        """Per-electrode value (n_dc, n), gradient (n_dc, n, 3), Hessian (n_dc, n, 3, 3)."""
        pts, _ = _as_points(r)
        n, k = len(pts), len(self.bases)
        vals, grads, hesses = np.empty((k, n)), np.empty((k, n, 3)), np.empty((k, n, 3, 3))
        if len(self._gauss_index):
            gi = self._gauss_index
            vals[gi], grads[gi], hesses[gi] = _gaussian_block(self._gauss_params, pts)
        for i in self._other_index:
            vals[i], grads[i], hesses[i] = self.bases[i].evaluate(pts)
        return vals, grads, hesses

    def fixed_response(self, r):
        """Unit-weight contributions: pseudopotential plus stray fields."""
        pts, _ = _as_points(r)
        val, grad, hess = self.pseudopotential.evaluate(pts)
        for s in self.stray:
            v, g, h = s.evaluate(pts)
            val, grad, hess = val + v, grad + g, hess + h
        return val, grad, hess

    def _check_voltages(self, voltages):
        u = np.asarray(voltages, dtype=float)
        if u.shape[-1] != self.n_electrodes:
            raise InvalidArgument(
                f"expected {self.n_electrodes} electrode voltages, got {u.shape[-1]}")
        if np.any(np.isnan(u)):
            raise InvalidArgument("voltage vector contains NaN")
        return u

    def probe(self, voltages, r) -> PotentialProbe:
        u = self._check_voltages(voltages)
        pts, single = _as_points(r)
        dv, dg, dh = self.dc_response(pts)
        fv, fg, fh = self.fixed_response(pts)
        val = np.tensordot(u, dv, axes=(0, 0)) + fv
        grad = np.tensordot(u, dg, axes=(0, 0)) + fg
        hess = np.tensordot(u, dh, axes=(0, 0)) + fh
        if single:
            return PotentialProbe(float(val[0]), grad[0], hess[0])
        return PotentialProbe(val, grad, hess)

    def gradient(self, voltages, r):
        """Gradient only; the hot path of the motion integrator."""
        return self.probe(voltages, r).gradient

    def with_stray(self, *fields) -> "TrapModel":
        return TrapModel(self.bases, self.pseudopotential, self.mass, self.charge,
                         self.stray + tuple(fields), self.length_scale)


def probe(model: TrapModel, voltages, r) -> PotentialProbe:
    return model.probe(voltages, r)


def curvature_target(omega, mass=YB171_MASS, charge=ELEMENTARY_CHARGE) -> float:
    """Axial curvature d^2 phi / dx^2 (V/m^2) that gives secular frequency ``omega``."""
    return mass * omega ** 2 / charge


def make_toy_trap(n_segments: int = 10, pitch: float = 280e-6, width: float | None = None,
                  curvature: float | None = None, tilt: float | None = None, *,
                  reference_voltage: float = 1.0,
                  radial_frequency: float = 2 * np.pi * 2.0e6,
                  correction_tilt: float | None = None,
                  mass: float = YB171_MASS, charge: float = ELEMENTARY_CHARGE) -> TrapModel:
    """Analytic surrogate trap: one Gaussian electrode per segment plus a
    correction electrode with a pure vertical field.

    Segment j sits at x_j = j * pitch.  The correction electrode's field
    defaults to cancelling the mean vertical tilt of the segment electrodes,
    so a common voltage offset on all electrodes only shifts the potential.
    """
    if n_segments < 6:
        raise InvalidArgument("need at least 6 segments")
    if not pitch > 0:
        raise InvalidArgument("pitch must be positive")
    width = 0.8 * pitch if width is None else width
    if not width > 0:
        raise InvalidArgument("width must be positive")
    curvature = 1.0 / width ** 2 if curvature is None else curvature
    tilt = 0.5 / width if tilt is None else tilt

    bases = [GaussianBasis(j, j * pitch, width, curvature, tilt, reference_voltage)
             for j in range(n_segments)]
    if correction_tilt is None:
        mean_sum = np.sqrt(2 * np.pi) * width / pitch
        correction_tilt = -tilt * mean_sum if tilt != 0 else 1.0 / width
    bases.append(TiltBasis(n_segments, correction_tilt, reference_voltage))

    k_r = curvature_target(radial_frequency, mass, charge)
    pseudo = HarmonicBasis(k_r, k_r)
    return TrapModel(tuple(bases), pseudo, mass, charge, length_scale=pitch)


def export_basis_grids(model: TrapModel, path, origin, spacing, shape) -> Path:
    """Sample every basis of ``model`` on a grid and write a grid file.

    Layout (numpy ``.npz`` archive, all arrays little-endian float64):

    * ``header``: UTF-8 JSON as uint8 bytes with keys ``format``, ``version``,
      ``electrode_count``, ``electrode_ids``, ``origin``, ``spacing``, ``shape``,
      ``mass``, ``charge``, ``reference_voltage``, ``length_scale``
    * ``electrode_000`` ... : one field of shape ``shape`` (C order, axes x, y, z)
    * ``pseudopotential``: the unit-weight rf pseudopotential field
    """
    origin = np.asarray(origin, dtype=float)
    spacing = np.asarray(spacing, dtype=float)
    shape = tuple(int(s) for s in shape)
    axes = [origin[k] + spacing[k] * np.arange(shape[k]) for k in range(3)]
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)

    header = {
        "format": GRID_FORMAT,
        "version": GRID_VERSION,
        "electrode_count": model.n_electrodes,
        "electrode_ids": [int(b.id) for b in model.bases],
        "origin": origin.tolist(),
        "spacing": spacing.tolist(),
        "shape": list(shape),
        "mass": model.mass,
        "charge": model.charge,
        "reference_voltage": float(model.bases[0].reference_voltage),
        "length_scale": model.length_scale,
    }
    arrays = {"header": np.frombuffer(json.dumps(header).encode(), dtype=np.uint8)}
    for k, b in enumerate(model.bases):
        arrays[f"electrode_{k:03d}"] = b.evaluate(mesh)[0].reshape(shape).astype("<f8")
    arrays["pseudopotential"] = model.pseudopotential.evaluate(mesh)[0].reshape(shape).astype("<f8")

    path = Path(path)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_basis_grids(path) -> TrapModel:
    """Read a grid file written by :func:`export_basis_grids`."""
    path = Path(path)
    try:
        archive = np.load(path, allow_pickle=False)
    except (OSError, ValueError) as exc:
        raise GridParseError(f"{path}: not a grid archive ({exc})") from exc
    with archive:
        if "header" not in archive.files:
            raise GridParseError("header record absent")
        try:
            header = json.loads(archive["header"].tobytes().decode())
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise GridParseError(f"malformed header record: {exc}") from exc
        required = ("format", "electrode_count", "origin", "spacing", "shape", "mass", "charge")
        missing = [k for k in required if k not in header]
        if missing:
            raise GridParseError(f"malformed header record: missing {missing}")
        if header["format"] != GRID_FORMAT:
            raise GridParseError(f"header record: unknown format {header['format']!r}")
        shape = tuple(header["shape"])
        n = int(header["electrode_count"])
        if "pseudopotential" not in archive.files:
            raise GridParseError("pseudopotential record absent")
        ids = header.get("electrode_ids", list(range(n)))
        u0 = float(header.get("reference_voltage", 1.0))

        def field_of(name):
            if name not in archive.files:
                raise GridParseError(f"{name} record absent")
            arr = archive[name]
            if arr.dtype != np.dtype("<f8"):
                raise GridParseError(f"{name} record: expected little-endian float64, got {arr.dtype}")
            if arr.shape != shape:
                raise GridParseError(f"{name} record: shape {arr.shape} inconsistent with header {shape}")
            if not np.all(np.isfinite(arr)):
                raise GridParseError(f"{name} record: non-finite values")
            return arr

        try:
            bases = [GridBasis(ids[k], header["origin"], header["spacing"],
                               field_of(f"electrode_{k:03d}"), u0) for k in range(n)]
            pseudo = GridBasis(-1, header["origin"], header["spacing"], field_of("pseudopotential"))
        except InvalidArgument as exc:
            raise GridParseError(str(exc)) from exc
    return TrapModel(tuple(bases), pseudo, float(header["mass"]), float(header["charge"]),
                     length_scale=float(header.get("length_scale", 280e-6)))


def find_minimum(model: TrapModel, voltages, r0, max_iter: int = 50, tol: float = 1e-13,
                 max_step: float | None = None):
    """Damped Newton descent to the nearest potential minimum.

    Returns ``(position, probe, converged)``.  The step is capped at
    ``max_step`` (default: a tenth of the model length scale) and falls back
    to scaled gradient descent where the Hessian is not positive definite.
    """
    r = np.array(r0, dtype=float)
    cap = model.length_scale / 10 if max_step is None else max_step
    sign = 1.0 if model.charge > 0 else -1.0
    for _ in range(max_iter):
        p = model.probe(voltages, r)
        g, h = sign * p.gradient, sign * p.hessian
        try:
            np.linalg.cholesky(h)
            step = -np.linalg.solve(h, g)
        except np.linalg.LinAlgError:
            scale = max(np.abs(np.diag(h)).max(), 1e-30)
            step = -g / scale
        norm = np.linalg.norm(step)
        if norm > cap:
            step *= cap / norm
        r = r + step
        if norm < tol:
            return r, model.probe(voltages, r), True
    return r, model.probe(voltages, r), False
