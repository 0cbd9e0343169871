"""Prescribed room airflows and Gaussian release sources."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


def _in_room(x, y, lx, ly, tol=1e-12):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if np.any((x < -tol) | (x > lx + tol) | (y < -tol) | (y > ly + tol)):
        raise ValueError(f"point outside the room [0, {lx}] x [0, {ly}]")
    return x, y


@dataclass(frozen=True)
class DoubleVortex:
    """Two counter-rotating cells split at ``x = l``.

    The vertical strengths are derived from the horizontal ones so the field
    is divergence free; pass ``wy_left``/``wy_right`` explicitly only to build
    deliberately inconsistent fields for testing.
    """

    l: float
    wx_left: float = 1.0
    wx_right: float = 1.0
    lx: float = 8.0
    ly: float = 4.0
    wy_left: float | None = None
    wy_right: float | None = None

    def __post_init__(self):
        if not (0.0 < self.l < self.lx):
            raise ValueError(f"vortex length l={self.l} must lie strictly inside (0, {self.lx})")
        if self.wy_left is None:
            object.__setattr__(self, "wy_left", self.wx_left * self.ly / self.l)
        if self.wy_right is None:
            object.__setattr__(self, "wy_right", self.wx_right * self.ly / (self.lx - self.l))

    def __call__(self, x, y):
        x, y = _in_room(x, y, self.lx, self.ly)
        return self._eval(x, y)

    def _eval(self, x, y):
        l, lx, ly = self.l, self.lx, self.ly
        left = x <= l
        xr = x - l
        cy, sy = np.cos(np.pi * y / ly), np.sin(np.pi * y / ly)
        vx = np.where(left, self.wx_left * np.sin(np.pi * x / l) * cy,
                      self.wx_right * np.sin(np.pi * xr / (lx - l)) * cy)
        vy = np.where(left, -self.wy_left * np.cos(np.pi * x / l) * sy,
                      -self.wy_right * np.cos(np.pi * xr / (lx - l)) * sy)
        return vx, vy

    def divergence(self, x, y):
        x, y = _in_room(x, y, self.lx, self.ly)
        l, lx, ly = self.l, self.lx, self.ly
        left = x <= l
        cy = np.cos(np.pi * y / ly)
        dvx = np.where(left, self.wx_left * (np.pi / l) * np.cos(np.pi * x / l),
                       self.wx_right * (np.pi / (lx - l)) * np.cos(np.pi * (x - l) / (lx - l)))
        wy = np.where(left, self.wy_left, self.wy_right)
        cx = np.where(left, np.cos(np.pi * x / l), np.cos(np.pi * (x - l) / (lx - l)))
        dvy = -wy * cx * (np.pi / ly)
        return (dvx + dvy) * cy

    def stream_function(self, x, y):
        """psi with (vx, vy) = (dpsi/dy, -dpsi/dx); zero on all walls.

        Only meaningful when the strength coupling holds (the default).
        """
        l, lx, ly = self.l, self.lx, self.ly
        sy = np.sin(np.pi * y / ly)
        return np.where(
            x <= l,
            self.wx_left * ly / np.pi * np.sin(np.pi * x / l) * sy,
            self.wx_right * ly / np.pi * np.sin(np.pi * (x - l) / (lx - l)) * sy,
        )

    @property
    def divergence_free(self) -> bool:
        return (math.isclose(self.wy_left, self.wx_left * self.ly / self.l, rel_tol=1e-14)
                and math.isclose(self.wy_right, self.wx_right * self.ly / (self.lx - self.l), rel_tol=1e-14))

    def key(self) -> tuple:
        return ("double_vortex", self.l, self.wx_left, self.wx_right, self.wy_left,
                self.wy_right, self.lx, self.ly)

    def cell_velocities(self, mesh) -> np.ndarray:
        """Advecting velocity at the quadrature points of every cell, (nc, 3, 2).

        Uses the rotated gradient of the interpolated stream function, which is
        piecewise constant, exactly solenoidal and tangential on the walls, so
        the discrete advection operator conserves mass to round-off.
        """
        if not self.divergence_free:
            return _pointwise(self._eval, mesh)
        psi = mesh.interpolate(self.stream_function)
        g = np.einsum("ci,cik->ck", psi[mesh.cells], mesh.grads)
        v = np.stack([g[:, 1], -g[:, 0]], axis=-1)
        return np.repeat(v[:, None, :], 3, axis=1)


@dataclass(frozen=True)
class Uniform:
    vx: float = -0.015
    vy: float = 0.0
    lx: float = 8.0
    ly: float = 4.0

    def __call__(self, x, y):
        x, y = _in_room(x, y, self.lx, self.ly)
        return np.full_like(x, self.vx), np.full_like(y, self.vy)

    def divergence(self, x, y):
        x, y = _in_room(x, y, self.lx, self.ly)
        return np.zeros_like(x)

    def key(self) -> tuple:
        return ("uniform", self.vx, self.vy, self.lx, self.ly)

    def cell_velocities(self, mesh) -> np.ndarray:
        return np.broadcast_to(np.array([self.vx, self.vy]), (mesh.n_cells, 3, 2)).copy()


def _pointwise(func, mesh) -> np.ndarray:
    q = mesh.quadrature_points()
    vx, vy = func(q[..., 0], q[..., 1])
    return np.stack([vx, vy], axis=-1)


@dataclass(frozen=True)
class PointwiseField:
    """Arbitrary velocity ``func(x, y) -> (vx, vy)`` sampled at quadrature points."""

    func: object
    name: str = "pointwise"

    def __call__(self, x, y):
        return self.func(np.asarray(x, float), np.asarray(y, float))

    def key(self) -> tuple:
        return ("pointwise", self.name, id(self.func))

    def cell_velocities(self, mesh) -> np.ndarray:
        return _pointwise(self.func, mesh)


VelocityField = DoubleVortex | Uniform | PointwiseField


def make_double_vortex(l: float, wx_left: float = 1.0, wx_right: float = 1.0,
                       lx: float = 8.0, ly: float = 4.0) -> DoubleVortex:
    return DoubleVortex(l, wx_left, wx_right, lx, ly)


def eval_velocity(field, point):
    x, y = point
    vx, vy = field(x, y)
    if np.ndim(vx) == 0:
        return float(vx), float(vy)
    return vx, vy


def divergence_at(field, point):
    return field.divergence(*point)


@dataclass(frozen=True)
class SourceSpec:
    """Time-invariant Gaussian release ``R / (pi eps) exp(-|x - xc|^2 / eps)``."""

    center: tuple[float, float]
    intensity: float = 2.5
    spread: float = 0.1

    def __post_init__(self):
        if self.intensity < 0:
            raise ValueError("source intensity must be non-negative")
        if self.spread <= 0:
            raise ValueError("source spread must be positive")
        object.__setattr__(self, "center", (float(self.center[0]), float(self.center[1])))

    def __call__(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        r2 = (x - self.center[0]) ** 2 + (y - self.center[1]) ** 2
        return self.intensity / (np.pi * self.spread) * np.exp(-r2 / self.spread)

    def check_inside(self, lx: float, ly: float):
        cx, cy = self.center
        if not (0 <= cx <= lx and 0 <= cy <= ly):
            raise ValueError(f"source center {self.center} outside the room")


def eval_source(src: SourceSpec, point) -> float:
    return src(*point)
