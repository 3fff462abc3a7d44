"""Discretized transport trajectories between two trap sites."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgument

PROFILES = ("poly5", "sine")


def profile_fraction(tau, profile: str = "poly5"):
    """Normalized displacement s/dx as a function of normalized time tau in [0, 1]."""
    tau = np.asarray(tau, dtype=float)
    if profile == "poly5":
        return tau ** 3 * (10 - 15 * tau + 6 * tau ** 2)
    if profile == "sine":
        return tau - np.sin(2 * np.pi * tau) / (2 * np.pi)
    raise InvalidArgument(f"unknown profile {profile!r}; choose from {PROFILES}")


def profile_velocity(tau, profile: str = "poly5"):
    """d(s/dx)/d(tau)."""
    tau = np.asarray(tau, dtype=float)
    if profile == "poly5":
        return 30 * tau ** 2 * (1 - tau) ** 2
    if profile == "sine":
        return 1 - np.cos(2 * np.pi * tau)
    raise InvalidArgument(f"unknown profile {profile!r}")


def profile_acceleration(tau, profile: str = "poly5"):
    """d^2(s/dx)/d(tau)^2."""
    tau = np.asarray(tau, dtype=float)
    if profile == "poly5":
        return 60 * tau * (1 - tau) * (1 - 2 * tau)
    if profile == "sine":
        return 2 * np.pi * np.sin(2 * np.pi * tau)
    raise InvalidArgument(f"unknown profile {profile!r}")


@dataclass(frozen=True)
class TransportPlan:
    distance: float
    duration: float
    dt: float
    n_steps: int
    positions: np.ndarray
    omega_x: float
    profile: str = "poly5"

    @property
    def start(self):
        return self.positions[0]

    @property
    def end(self):
        return self.positions[-1]

    @property
    def times(self):
        return np.arange(self.n_steps + 1) * self.dt

    def fraction(self, i):
        """Fraction of the distance covered at step ``i`` (0 for a static plan)."""
        if self.distance == 0:
            return np.zeros_like(np.asarray(i, dtype=float))
        return (self.positions[i, 0] - self.positions[0, 0]) / self.distance

    def reversed(self) -> "TransportPlan":
        """The same path traversed from B back to A."""
        return TransportPlan(-self.distance, self.duration, self.dt, self.n_steps,
                             self.positions[::-1].copy(), self.omega_x, self.profile)


def step_count(duration: float, dt: float) -> int:
    if not dt > 0 or not duration > 0:
        raise InvalidArgument("duration and step must be positive")
    ratio = duration / dt
    n = int(round(ratio))
    if n < 1 or abs(ratio - n) > 1e-9 * max(1.0, ratio):
        raise InvalidArgument(f"duration {duration} is not an integer multiple of step {dt}")
    return n


def generate_trajectory(distance: float, duration: float, dt: float, profile: str = "poly5",
                        start=(0.0, 0.0, 0.0), omega_x: float = 2 * np.pi * 230e3,
                        allow_static: bool = False) -> TransportPlan:
    """Sample the transport path r_i = r(i dt) for i = 0..L along the trap axis.

    A zero ``distance`` is rejected unless ``allow_static`` is set; a static
    plan holds the ion at ``start`` for L steps.
    """
    if distance == 0 and not allow_static:
        raise InvalidArgument("transport distance must be nonzero")
    if profile not in PROFILES:
        raise InvalidArgument(f"unknown profile {profile!r}; choose from {PROFILES}")
    n = step_count(duration, dt)
    tau = np.arange(n + 1) / n
    s = distance * profile_fraction(tau, profile)
    s[0], s[-1] = 0.0, distance
    positions = np.tile(np.asarray(start, dtype=float), (n + 1, 1))
    positions[:, 0] += s
    positions.setflags(write=False)
    return TransportPlan(float(distance), n * dt, float(dt), n, positions, float(omega_x), profile)


def peak_speed(distance: float, duration: float, profile: str = "poly5") -> float:
    """Maximum |ds/dt|, reached at the midpoint for both profiles."""
    return abs(distance) / duration * float(profile_velocity(0.5, profile))
