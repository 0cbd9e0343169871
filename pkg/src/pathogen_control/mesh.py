"""Structured triangular mesh of the rectangular room and P1 helpers.

Vertices are numbered row-major from the origin, ``k = j * (nx + 1) + i``.
Every rectangle is split along its lower-left to upper-right diagonal into
two counter-clockwise triangles.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp


@dataclass(frozen=True)
class MeshSpec:
    lx: float = 8.0
    ly: float = 4.0
    nx: int = 80
    ny: int = 40

    def __post_init__(self):
        if not (self.lx > 0 and self.ly > 0):
            raise ValueError(f"room dimensions must be positive, got lx={self.lx}, ly={self.ly}")
        if int(self.nx) != self.nx or int(self.ny) != self.ny or self.nx < 1 or self.ny < 1:
            raise ValueError(f"nx and ny must be integers >= 1, got nx={self.nx}, ny={self.ny}")

    @property
    def n_cells(self) -> int:
        return 2 * self.nx * self.ny

    @property
    def n_vertices(self) -> int:
        return (self.nx + 1) * (self.ny + 1)


@dataclass(frozen=True, eq=False)
class Mesh:
    spec: MeshSpec
    vertices: np.ndarray  # (nv, 2)
    cells: np.ndarray  # (nc, 3), counter-clockwise
    boundary: np.ndarray  # (nv,) bool
    # derived per-cell geometry
    areas: np.ndarray = field(repr=False)
    grads: np.ndarray = field(repr=False)  # (nc, 3, 2) gradients of the hat functions

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    @property
    def h(self) -> float:
        """Longest rectangle side."""
        return max(self.spec.lx / self.spec.nx, self.spec.ly / self.spec.ny)

    def quadrature_points(self) -> np.ndarray:
        """Edge midpoints of every cell, shape (nc, 3, 2).

        Point ``k`` is the midpoint of the edge opposite local vertex ``k``,
        so hat function ``i`` equals 0.5 there for ``i != k`` and 0 for ``i == k``.
        """
        p = self.vertices[self.cells]
        return 0.5 * (p[:, [1, 2, 0]] + p[:, [2, 0, 1]])

    def coo_indices(self):
        """Row/column index arrays for scattering (nc, 3, 3) local blocks."""
        rows = np.repeat(self.cells, 3, axis=1).ravel()
        cols = np.tile(self.cells, (1, 3)).ravel()
        return rows, cols

    def assemble(self, local: np.ndarray) -> sp.csr_matrix:
        """Sum per-cell (nc, 3, 3) blocks into a global CSR matrix."""
        indptr, indices, scatter = self._pattern()
        data = np.bincount(scatter, weights=local.ravel(), minlength=len(indices))
        n = self.n_vertices
        return sp.csr_matrix((data, indices.copy(), indptr.copy()), shape=(n, n))

    def _pattern(self):
        # CSR sparsity pattern and the position of every local entry in it
        cached = self.__dict__.get("_csr_pattern")
        if cached is None:
            rows, cols = self.coo_indices()
            n = self.n_vertices
            key = rows.astype(np.int64) * n + cols
            uniq, scatter = np.unique(key, return_inverse=True)
            r, c = np.divmod(uniq, n)
            indptr = np.concatenate([[0], np.cumsum(np.bincount(r, minlength=n))])
            cached = (indptr, c.astype(np.int32), scatter.ravel())
            object.__setattr__(self, "_csr_pattern", cached)
        return cached

    def assemble_vector(self, local: np.ndarray) -> np.ndarray:
        """Sum per-cell (nc, 3) contributions into a nodal vector."""
        return np.bincount(self.cells.ravel(), weights=local.ravel(), minlength=self.n_vertices)

    def mass_matrix(self) -> sp.csr_matrix:
        ref = (np.ones((3, 3)) + np.eye(3)) / 12.0
        return self.assemble(self.areas[:, None, None] * ref)

    def stiffness_matrix(self) -> sp.csr_matrix:
        local = self.areas[:, None, None] * np.einsum("cik,cjk->cij", self.grads, self.grads)
        return self.assemble(local)

    def lumped_mass(self) -> np.ndarray:
        """Integral of each hat function, i.e. row sums of the mass matrix."""
        return self.assemble_vector(np.repeat(self.areas[:, None] / 3.0, 3, axis=1))

    def interpolate(self, func) -> np.ndarray:
        """Nodal interpolant of ``func(x, y)`` (vectorised)."""
        return np.asarray(func(self.vertices[:, 0], self.vertices[:, 1]), dtype=float)

    def locate(self, x: np.ndarray, y: np.ndarray):
        """Cell index and barycentric coordinates of points inside the room."""
        s = self.spec
        hx, hy = s.lx / s.nx, s.ly / s.ny
        i = np.clip(np.floor(x / hx).astype(int), 0, s.nx - 1)
        j = np.clip(np.floor(y / hy).astype(int), 0, s.ny - 1)
        u = x / hx - i
        v = y / hy - j
        upper = v > u  # above the diagonal -> second triangle of the rectangle
        cell = 2 * (j * s.nx + i) + upper
        # lower: (v00, v10, v11); upper: (v00, v11, v01)
        bary = np.where(
            upper[:, None],
            np.stack([1 - v, u, v - u], axis=1),
            np.stack([1 - u, u - v, v], axis=1),
        )
        return cell, bary

    def evaluate(self, values: np.ndarray, x, y) -> np.ndarray:
        """Evaluate a P1 field at arbitrary points in the room."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        y = np.atleast_1d(np.asarray(y, dtype=float))
        cell, bary = self.locate(x, y)
        return np.sum(values[self.cells[cell]] * bary, axis=1)

    def to_csv(self, directory) -> tuple[Path, Path]:
        """Write ``vertices.csv`` (id,x,y,boundary) and ``cells.csv`` (id,v0,v1,v2)."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        vpath, cpath = directory / "vertices.csv", directory / "cells.csv"
        with open(vpath, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "x", "y", "boundary"])
            for k, ((x, y), b) in enumerate(zip(self.vertices, self.boundary)):
                w.writerow([k, repr(float(x)), repr(float(y)), int(b)])
        with open(cpath, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "v0", "v1", "v2"])
            for k, c in enumerate(self.cells):
                w.writerow([k, *map(int, c)])
        return vpath, cpath


def build_mesh(spec: MeshSpec) -> Mesh:
    nx, ny = spec.nx, spec.ny
    xs = np.linspace(0.0, spec.lx, nx + 1)
    ys = np.linspace(0.0, spec.ly, ny + 1)
    X, Y = np.meshgrid(xs, ys)  # row-major: y outer, x inner
    vertices = np.column_stack([X.ravel(), Y.ravel()])

    i, j = np.meshgrid(np.arange(nx), np.arange(ny))
    v00 = (j * (nx + 1) + i).ravel()
    v10 = v00 + 1
    v01 = v00 + nx + 1
    v11 = v01 + 1
    lower = np.column_stack([v00, v10, v11])
    upper = np.column_stack([v00, v11, v01])
    cells = np.stack([lower, upper], axis=1).reshape(-1, 3)

    ix = np.arange(nx + 1)
    jy = np.arange(ny + 1)
    I, J = np.meshgrid(ix, jy)
    boundary = ((I == 0) | (I == nx) | (J == 0) | (J == ny)).ravel()

    areas, grads = _cell_geometry(vertices, cells)
    return Mesh(spec, vertices, cells, boundary, areas, grads)


def _cell_geometry(vertices, cells):
    p = vertices[cells]
    e1 = p[:, 1] - p[:, 0]
    e2 = p[:, 2] - p[:, 0]
    det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    if np.any(det <= 0):
        raise ValueError("mesh contains non-positively oriented cells")
    areas = 0.5 * det
    # gradient of hat i is the inward-rotated opposite edge / (2 * area)
    opp = p[:, [2, 0, 1]] - p[:, [1, 2, 0]]
    grads = np.stack([-opp[..., 1], opp[..., 0]], axis=-1) / det[:, None, None]
    return areas, grads


@dataclass(frozen=True)
class Region:
    """Axis-aligned box; open sides default to infinity.

    ``Region(xmax=2.0)`` is the half-plane ``x <= 2``.
    """

    xmin: float = -math.inf
    xmax: float = math.inf
    ymin: float = -math.inf
    ymax: float = math.inf

    def contains(self, x, y):
        return (x >= self.xmin) & (x <= self.xmax) & (y >= self.ymin) & (y <= self.ymax)

    def area_in(self, lx: float, ly: float) -> float:
        w = max(0.0, min(self.xmax, lx) - max(self.xmin, 0.0))
        h = max(0.0, min(self.ymax, ly) - max(self.ymin, 0.0))
        return w * h

    @classmethod
    def whole_room(cls) -> "Region":
        return cls()


def _clip(poly: list, axis: int, bound: float, keep_below: bool) -> list:
    """Sutherland-Hodgman clip of a convex polygon against one axis-aligned line."""
    out = []
    n = len(poly)
    for k in range(n):
        a, b = poly[k], poly[(k + 1) % n]
        da = (a[axis] - bound) if keep_below else (bound - a[axis])
        db = (b[axis] - bound) if keep_below else (bound - b[axis])
        if da <= 0:
            out.append(a)
        if (da < 0 < db) or (db < 0 < da):
            t = da / (da - db)
            out.append(a + t * (b - a))
    return out


def _clip_to_box(tri: np.ndarray, region: Region) -> list:
    poly = list(tri)
    for axis, bound, below in ((0, region.xmax, True), (0, region.xmin, False),
                               (1, region.ymax, True), (1, region.ymin, False)):
        if math.isfinite(bound) and poly:
            poly = _clip(poly, axis, bound, below)
    return poly


def region_weights(mesh: Mesh, region: Region) -> tuple[np.ndarray, np.ndarray]:
    """Exact integration weights of ``region`` on ``mesh``.

    Returns ``(cell_area, nodal)`` where ``cell_area[c]`` is the area of cell
    ``c`` inside the region and ``nodal[k]`` is the integral of hat function
    ``k`` over the region, so that ``nodal @ u`` integrates a P1 field exactly.
    Cells cut by the region boundary are clipped and integrated over the
    clipped polygon.
    """
    p = mesh.vertices[mesh.cells]
    inside = region.contains(p[..., 0], p[..., 1])
    full = inside.all(axis=1)
    lo, hi = p.min(axis=1), p.max(axis=1)
    disjoint = ((hi[:, 0] <= region.xmin) | (lo[:, 0] >= region.xmax)
                | (hi[:, 1] <= region.ymin) | (lo[:, 1] >= region.ymax))
    cut = ~full & ~disjoint

    cell_area = np.where(full, mesh.areas, 0.0)
    local = np.where(full[:, None], np.repeat(mesh.areas[:, None] / 3.0, 3, axis=1), 0.0)

    for c in np.flatnonzero(cut):
        tri = p[c]
        poly = _clip_to_box(tri, region)
        if len(poly) < 3:
            continue
        area_c = 0.0
        phi_int = np.zeros(3)
        for a, b in zip(poly[1:-1], poly[2:]):
            q0 = poly[0]
            sub = 0.5 * ((a[0] - q0[0]) * (b[1] - q0[1]) - (a[1] - q0[1]) * (b[0] - q0[0]))
            centroid = (q0 + a + b) / 3.0
            phi_int += sub * _barycentric(tri, centroid)
            area_c += sub
        cell_area[c] = area_c
        local[c] = phi_int

    return cell_area, mesh.assemble_vector(local)


def _barycentric(tri: np.ndarray, pt: np.ndarray) -> np.ndarray:
    T = np.column_stack([tri[1] - tri[0], tri[2] - tri[0]])
    l12 = np.linalg.solve(T, pt - tri[0])
    return np.array([1.0 - l12.sum(), l12[0], l12[1]])


def region_mask(mesh: Mesh, region: Region) -> np.ndarray:
    """Per-cell area of ``region`` (zero for cells outside it)."""
    return region_weights(mesh, region)[0]
