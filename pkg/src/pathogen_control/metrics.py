"""Exposure objective and the per-interval reward built from it."""
from __future__ import annotations

import numpy as np

from .mesh import Mesh, Region, region_weights


def integrate_region(c: np.ndarray, mesh: Mesh, region: Region, weights=None) -> float:
    """Exact integral of the P1 field ``c`` over ``region``.

    ``weights`` may carry precomputed nodal weights from :func:`region_weights`.
    """
    if weights is None:
        weights = region_weights(mesh, region)[1]
    return float(weights @ c)


def exposure_metric(states, mesh: Mesh, region: Region, dt: float, weights=None) -> float:
    """Space-time integral of concentration over ``region`` and ``[0, T]``.

    ``states`` holds the fields at ``t = 0, dt, ..., T``; the time integral
    uses the trapezoidal rule.
    """
    states = np.asarray(states)
    if states.ndim != 2 or len(states) == 0:
        raise ValueError("exposure_metric needs a non-empty (n_times, n_vertices) series")
    if weights is None:
        weights = region_weights(mesh, region)[1]
    q = states @ weights
    return trapezoid(q, dt)


def trapezoid(q: np.ndarray, dt: float) -> float:
    if len(q) < 2:
        return 0.0
    return float(dt * (0.5 * q[0] + q[1:-1].sum() + 0.5 * q[-1]))


def interval_reward(q_start: float, q_end: float, dt: float) -> float:
    """Negated exposure accumulated over one interval of length ``dt``.

    ``q_start`` and ``q_end`` are the region integrals at the interval ends.
    The sign is flipped so that maximising reward minimises exposure.
    """
    return -0.5 * dt * (q_start + q_end)


class ExposureAccumulator:
    """Running exposure integral, fed one state at a time."""

    def __init__(self, mesh: Mesh, region: Region, dt: float):
        self.weights = region_weights(mesh, region)[1]
        self.dt = dt
        self.reset()

    def reset(self, c0: np.ndarray | None = None):
        self.total = 0.0
        self.t = 0.0
        self.q = 0.0 if c0 is None else float(self.weights @ c0)

    def region_integral(self, c) -> float:
        return float(self.weights @ c)

    def add(self, c: np.ndarray) -> float:
        """Advance by one interval ending at state ``c``; returns that interval's reward."""
        q_new = self.region_integral(c)
        r = interval_reward(self.q, q_new, self.dt)
        self.total -= r
        self.q = q_new
        self.t += self.dt
        return r
