"""Brute-force ground truth: mesh study and constant-action parameter sweeps.

Every sweep point is an independent constant-action episode on its own solver,
so points can be farmed out to worker processes; results are always gathered
in parameter order.
"""
from __future__ import annotations

import csv
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .envs import EpisodeSpec
from .flowfields import Uniform, make_double_vortex
from .mesh import MeshSpec, build_mesh
from .metrics import ExposureAccumulator
from .transport import TransportSolver

WORKERS_ENV = "PATHOGEN_CONTROL_WORKERS"


@dataclass(frozen=True)
class SweepResult:
    name: str
    params: np.ndarray
    J: np.ndarray

    def __post_init__(self):
        if len(self.params) != len(self.J) or len(self.J) == 0:
            raise ValueError("params and J must be non-empty and of equal length")

    @property
    def argmin_index(self) -> int:
        return int(np.argmin(self.J))

    @property
    def argmin(self) -> float:
        return float(self.params[self.argmin_index])

    @property
    def min_value(self) -> float:
        return float(self.J[self.argmin_index])

    def relative_changes(self) -> np.ndarray:
        """|J[k+1] - J[k]| / J[k] between successive entries."""
        return np.abs(np.diff(self.J)) / self.J[:-1]

    def to_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["param", "J_e"])
            for p, j in zip(self.params, self.J):
                w.writerow([_fmt(p), _fmt(j)])
            fh.write(f"# argmin,{_fmt(self.argmin)},{_fmt(self.min_value)}\n")
        return path

    @classmethod
    def from_csv(cls, path, name: str = "") -> "SweepResult":
        params, J = [], []
        with open(path, newline="") as fh:
            for row in csv.reader(fh):
                if not row or row[0].startswith("#") or row[0] == "param":
                    continue
                params.append(float(row[0]))
                J.append(float(row[1]))
        return cls(name, np.array(params), np.array(J))


def _fmt(x) -> str:
    return f"{float(x):.17g}"


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        raise ValueError(f"{WORKERS_ENV} must be an integer") from None


def constant_action_exposure(spec: EpisodeSpec, action: float) -> float:
    """J_e of one episode with the action held at ``action`` throughout."""
    mesh = build_mesh(spec.mesh)
    solver = TransportSolver(mesh, spec.transport_params)
    acc = ExposureAccumulator(mesh, spec.region, spec.dt)
    c = solver.zeros()
    acc.reset(c)
    src = spec.pathogen_source
    if spec.problem == "vortex":
        v = make_double_vortex(action, spec.wx, spec.wx, spec.mesh.lx, spec.mesh.ly)
        for _ in range(spec.n_steps):
            c = solver.step(v, c, src)
            acc.add(c)
    else:
        v = Uniform(*spec.uniform_velocity, spec.mesh.lx, spec.mesh.ly)
        chp = solver.zeros()
        src_hp = spec.hp_source(action)
        for _ in range(spec.n_steps):
            c, chp = solver.step_coupled(v, c, chp, src, src_hp)
            acc.add(c)
    return acc.total


def _point(args):
    spec, action = args
    return constant_action_exposure(spec, action)


def _run(jobs, workers):
    workers = default_workers() if workers is None else workers
    if workers <= 1 or len(jobs) <= 1:
        return [_point(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
        return list(pool.map(_point, jobs))


def _check_bounds(values, lo, hi, what):
    values = np.asarray(values, dtype=float)
    if values.ndim != 1 or len(values) == 0:
        raise ValueError(f"{what} must be a non-empty 1-D sequence")
    if np.any(values < lo) or np.any(values > hi):
        raise ValueError(f"{what} must lie in [{lo}, {hi}]")
    return values


def mesh_study(nx_values=(20, 40, 80, 160), spec: EpisodeSpec | None = None, l: float = 4.0,
               workers: int | None = None) -> SweepResult:
    """J_e over the whole room for a double vortex of length ``l``, with ny = nx / 2."""
    spec = spec or EpisodeSpec()
    nx_values = list(nx_values)
    if any(int(n) != n or n < 2 or n % 2 for n in nx_values):
        raise ValueError("mesh study needs even nx values")
    base = replace(spec, problem="vortex", region_xmax=spec.mesh.lx)
    jobs = [(replace(base, mesh=MeshSpec(spec.mesh.lx, spec.mesh.ly, int(n), int(n) // 2)), l)
            for n in nx_values]
    return SweepResult("mesh_study", np.array(nx_values, dtype=float), np.array(_run(jobs, workers)))


def sweep_vortex_length(l_values=None, spec: EpisodeSpec | None = None,
                        workers: int | None = None) -> SweepResult:
    spec = replace(spec or EpisodeSpec(), problem="vortex")
    if l_values is None:
        l_values = np.arange(2.0, 5.0 + 1e-9, 0.25)
    l_values = _check_bounds(l_values, 0.5, 7.5, "vortex lengths")
    J = _run([(spec, float(l)) for l in l_values], workers)
    return SweepResult("sweep_vortex", l_values, np.array(J))


def sweep_hp_position(x_values=None, spec: EpisodeSpec | None = None,
                      workers: int | None = None) -> SweepResult:
    spec = replace(spec or EpisodeSpec(problem="hp"), problem="hp")
    if x_values is None:
        x_values = np.arange(3.0, 6.5 + 1e-9, 0.25)
    x_values = _check_bounds(x_values, 0.25, 7.75, "HP positions")
    J = _run([(spec, float(x)) for x in x_values], workers)
    return SweepResult("sweep_hp", x_values, np.array(J))
