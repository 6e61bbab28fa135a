"""Graduated non-convexity flow over smoothed energy families."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Protocol

import numpy as np

from .gmm import GaussianMixture, energy_batch

__all__ = [
    "FlowDivergence",
    "Schedule",
    "EnergyFamily",
    "GMMFamily",
    "log_schedule",
    "gnc_flow_step",
    "run_gnc_flow",
    "equally_spaced_starts",
    "attainment_rate",
    "rate_grid",
]


class FlowDivergence(FloatingPointError):
    """A flow step produced a non-finite gradient."""


class EnergyFamily(Protocol):
    """Anything mapping ``(x, t)`` to ``(F(x, t), grad_x F(x, t))``."""

    def __call__(self, x: np.ndarray, t: float) -> tuple[np.ndarray, np.ndarray]: ...


@dataclass(frozen=True)
class GMMFamily:
    """Smoothed mixture energy evaluated pointwise on a batch of 1D points.

    ``x`` may be a scalar or an array of independent points (each a point in
    R^d, stacked along the leading axis when d > 1).
    """

    gmm: GaussianMixture

    def __call__(self, x, t):
        x = np.asarray(x, dtype=float)
        pts = x.reshape(-1, self.gmm.dim)
        v, g, _ = energy_batch(self.gmm, pts, t, hessian=False)
        return v.reshape(x.shape[: x.ndim - (self.gmm.dim > 1)]), g.reshape(x.shape)


@dataclass(frozen=True)
class Schedule:
    """Non-increasing smoothing levels with per-step step sizes.

    ``values[i]`` is the smoothing used by step ``i``.  Strictly decreasing
    schedules come from :func:`log_schedule`; :meth:`constant` builds the
    degenerate no-smoothing-change schedule used as a baseline.
    """

    values: np.ndarray
    step_sizes: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float).reshape(-1)
        eta = np.broadcast_to(np.asarray(self.step_sizes, dtype=float), v.shape).copy()
        if v.size < 1:
            raise ValueError("schedule needs at least one value")
        if np.any(v <= 0) or np.any(np.diff(v) > 0):
            raise ValueError("schedule values must be positive and non-increasing")
        if np.any(eta < 0):
            raise ValueError("step sizes must be nonnegative")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "step_sizes", eta)

    def __len__(self) -> int:
        return self.values.size

    @classmethod
    def constant(cls, t: float, steps: int, eta: float = 1.0) -> "Schedule":
        return cls(np.full(steps, float(t)), eta)


def log_schedule(t0: float, t_min: float, steps: int, eta=1.0) -> Schedule:
    """Geometrically spaced smoothing from ``t0`` down to ``t_min`` inclusive."""
    if not (t0 > t_min > 0):
        raise ValueError(f"need t0 > t_min > 0, got t0={t0}, t_min={t_min}")
    if steps < 1:
        raise ValueError("steps must be at least 1")
    if steps == 1:
        return Schedule(np.array([t0]), eta)
    return Schedule(np.logspace(np.log10(t0), np.log10(t_min), steps), eta)


def gnc_flow_step(family: EnergyFamily, x, t: float, eta: float = 1.0):
    """One variance-preconditioned gradient step ``x - eta * t * grad F(x, t)``."""
    if not t > 0:
        raise ValueError("t must be positive")
    if eta < 0:
        raise ValueError("eta must be nonnegative")
    _, g = family(x, t)
    if not np.all(np.isfinite(g)):
        raise FlowDivergence(f"non-finite gradient at t={t}")
    return np.asarray(x, dtype=float) - eta * t * g


def run_gnc_flow(family: EnergyFamily, x0, schedule: Schedule) -> list[np.ndarray]:
    """Trajectory ``[x0, x1, ..., xI]`` of the GNC flow."""
    traj = [np.asarray(x0, dtype=float)]
    for t, eta in zip(schedule.values, schedule.step_sizes):
        traj.append(gnc_flow_step(family, traj[-1], t, eta))
    return traj


def equally_spaced_starts(lower: float, upper: float, n: int) -> np.ndarray:
    if n < 2:
        raise ValueError("need at least two starts")
    if not upper > lower:
        raise ValueError("degenerate domain")
    return np.linspace(lower, upper, n)


def attainment_rate(family: EnergyFamily, n_starts: int, domain, schedule: Schedule,
                    target: float, tol: float = 0.1) -> float:
    """Fraction of flows from equally spaced starts ending within ``tol`` of ``target``.

    All starts are integrated together as one batch; each point is an
    independent trajectory, so the count is order-independent.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    x = equally_spaced_starts(domain[0], domain[1], n_starts)
    for t, eta in zip(schedule.values, schedule.step_sizes):
        x = gnc_flow_step(family, x, t, eta)
    hits = np.abs(x - target) <= tol
    return float(np.count_nonzero(hits)) / n_starts


def rate_grid(family: EnergyFamily, t0_values, step_counts, *, t_min: float = 1e-4,
              n_starts: int = 1000, domain=(-3.0, 3.0), target: float = 0.5,
              tol: float = 0.1, eta: float = 1.0,
              schedule_fn: Callable[[float, float, int, float], Schedule] | None = None):
    """Attainment rate for every ``(t0, I)`` cell, as rows ``(t0, I, rate)``.

    A ``t0`` equal to ``t_min`` uses a constant schedule at ``t_min``.
    """
    rows = []
    for t0 in t0_values:
        for steps in step_counts:
            if schedule_fn is not None:
                sched = schedule_fn(t0, t_min, steps, eta)
            elif t0 > t_min:
                sched = log_schedule(t0, t_min, steps, eta)
            else:
                sched = Schedule.constant(t_min, steps, eta)
            rate = attainment_rate(family, n_starts, domain, sched, target, tol)
            rows.append((float(t0), int(steps), rate))
    return rows
