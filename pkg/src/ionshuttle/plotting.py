"""SVG figures for reports."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

plt.rcParams["svg.hashsalt"] = "ionshuttle"


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def plot_fringe(data, fit, p_bb, p_db, path):
    """Tagged bright fraction against phase with the fitted fringe."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(data.phases, data.bright / np.maximum(data.trials, 1), "o", ms=4, label="tagged bright")
    phi = np.linspace(0, 2 * np.pi, 400)
    p = fit.offset + fit.amplitude * np.sin(phi - fit.phase)
    ax.plot(phi, p * p_bb + (1 - p) * (1 - p_db), "-", label="fit")
    ax.set_xlabel("phase (rad)")
    ax.set_ylabel("bright fraction")
    ax.set_title(f"M = {data.transports}")
    ax.legend(frameon=False)
    return _save(fig, path)


def plot_curve(curve, path, xlabel="parameter", reference=None):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(curve.grid, curve.density, "-")
    lo, hi = curve.interval
    sel = (curve.grid >= lo) & (curve.grid <= hi)
    ax.fill_between(curve.grid[sel], curve.density[sel], alpha=0.3)
    if reference is not None:
        ax.axvline(reference, color="k", ls=":")
    ax.set_xlabel(xlabel)
    ax.set_ylabel("likelihood")
    return _save(fig, path)


def plot_ramp(ramp, path):
    """Source and electrode voltages of the forward leg."""
    fig, ax = plt.subplots(figsize=(6, 4))
    t = np.arange(len(ramp.forward.source)) * ramp.dt * 1e6
    for j in range(ramp.n_electrodes):
        line, = ax.step(t, ramp.forward.source[:, j], where="post", lw=0.8)
        ax.plot(t, ramp.forward.electrode[:, j], color=line.get_color(), lw=1.5)
    ax.set_xlabel("time (us)")
    ax.set_ylabel("voltage (V)")
    return _save(fig, path)


def plot_tracking(data, fit, path):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    levels = np.unique(data.skipped)
    means = [data.photons[data.skipped == m].mean() for m in levels]
    ax.plot(levels, means, "o")
    x = np.linspace(0, levels.max(), 50)
    ax.plot(x, fit.offset + fit.slope * x, "-")
    ax.set_xlabel("skipped round trips")
    ax.set_ylabel("photons per run")
    return _save(fig, path)
