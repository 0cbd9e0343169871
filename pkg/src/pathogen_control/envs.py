"""Episodic control environments for the two room problems.

``vortex``: the action is the left-vortex length of a double-vortex airflow.
``hp``: the action is the x position of a disinfectant source at fixed height
in a fixed uniform airflow; pathogen and disinfectant are coupled.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .flowfields import SourceSpec, Uniform, make_double_vortex
from .mesh import Mesh, MeshSpec, Region, build_mesh, region_weights
from .metrics import interval_reward
from .transport import TransportParams, TransportSolver

PROBLEMS = ("vortex", "hp")

_BOUNDS = {"vortex": (0.5, 7.5), "hp": (0.25, 7.75)}


def action_bounds(problem: str) -> tuple[float, float]:
    try:
        return _BOUNDS[problem]
    except KeyError:
        raise ValueError(f"unknown problem {problem!r}; expected one of {PROBLEMS}") from None


def squash(u, problem: str):
    """Map an unbounded value onto the action interval with a scaled tanh."""
    lo, hi = action_bounds(problem)
    return lo + 0.5 * (hi - lo) * (np.tanh(u) + 1.0)


@dataclass(frozen=True)
class EpisodeSpec:
    problem: str = "vortex"
    T: float = 600.0
    dt: float = 1.0
    mesh: MeshSpec = field(default_factory=MeshSpec)
    K: float = 0.022
    K_hp: float = 0.022
    lam: float = 0.0085
    lam_hp: float = 0.0085
    alpha1: float = 0.2
    alpha2: float = 0.2
    R: float = 2.5
    R_hp: float = 2.5
    eps: float = 0.1
    source: tuple[float, float] = (6.0, 2.0)
    hp_y: float = 3.0
    wx: float = 1.0
    uniform_velocity: tuple[float, float] = (-0.015, 0.0)
    region_xmax: float | None = None  # None: 2 m for vortex, 4 m for hp
    obs_grid: tuple[int, int] = (16, 8)
    obs_ceiling: float = 10.0
    action_quantum: float | None = None

    def __post_init__(self):
        if self.problem not in PROBLEMS:
            raise ValueError(f"unknown problem {self.problem!r}")
        n = self.T / self.dt
        if self.T <= 0 or self.dt <= 0 or abs(n - round(n)) > 1e-9:
            raise ValueError("T must be a positive multiple of dt")
        lx, ly = self.mesh.lx, self.mesh.ly
        for x, y in (self.source, (0.0, self.hp_y)):
            if not (0 <= x <= lx and 0 <= y <= ly):
                raise ValueError(f"source position {(x, y)} outside the room")

    @property
    def n_steps(self) -> int:
        return int(round(self.T / self.dt))

    @property
    def region(self) -> Region:
        xmax = self.region_xmax
        if xmax is None:
            xmax = 2.0 if self.problem == "vortex" else 4.0
        return Region(xmax=xmax)

    @property
    def transport_params(self) -> TransportParams:
        return TransportParams(K=self.K, K_hp=self.K_hp, lam=self.lam, lam_hp=self.lam_hp,
                               alpha1=self.alpha1, alpha2=self.alpha2, dt=self.dt)

    @property
    def pathogen_source(self) -> SourceSpec:
        return SourceSpec(self.source, self.R, self.eps)

    def hp_source(self, x: float) -> SourceSpec:
        return SourceSpec((x, self.hp_y), self.R_hp, self.eps)

    @property
    def obs_scale(self) -> float:
        """Normalisation constant R T / (lx ly)."""
        return self.R * self.T / (self.mesh.lx * self.mesh.ly)

    @property
    def obs_dim(self) -> int:
        nc = self.obs_grid[0] * self.obs_grid[1]
        return nc if self.problem == "vortex" else 2 * nc + 2


def coarse_average_operator(mesh: Mesh, grid: tuple[int, int]) -> sp.csr_matrix:
    """Rows average a P1 field over each block of a ``gx`` x ``gy`` grid (row-major)."""
    gx, gy = grid
    lx, ly = mesh.spec.lx, mesh.spec.ly
    bx, by = lx / gx, ly / gy
    rows = []
    for j in range(gy):
        for i in range(gx):
            box = Region(i * bx, (i + 1) * bx, j * by, (j + 1) * by)
            rows.append(region_weights(mesh, box)[1] / (bx * by))
    return sp.csr_matrix(np.array(rows))


class RoomEnv:
    """Reset/step environment; one instance per training run."""

    def __init__(self, spec: EpisodeSpec | None = None, mesh: Mesh | None = None,
                 log_dir=None, cache_size: int = 160):
        self.spec = spec or EpisodeSpec()
        self.mesh = mesh or build_mesh(self.spec.mesh)
        self.params = self.spec.transport_params
        self.solver = TransportSolver(self.mesh, self.params, cache_size=cache_size)
        self.weights = region_weights(self.mesh, self.spec.region)[1]
        self.coarse = coarse_average_operator(self.mesh, self.spec.obs_grid)
        self.bounds = action_bounds(self.spec.problem)
        self.src_c = self.spec.pathogen_source
        self.velocity = Uniform(*self.spec.uniform_velocity, self.spec.mesh.lx, self.spec.mesh.ly)
        self.log_dir = Path(log_dir) if log_dir is not None else None
        self.episode = -1
        self.t_step = 0
        self.done = True
        self._log_rows: list = []

    @property
    def obs_dim(self) -> int:
        return self.spec.obs_dim

    def reset(self, seed: int | None = None) -> np.ndarray:
        if seed is not None:
            self.seed = seed
        self.rng = np.random.default_rng(getattr(self, "seed", None))
        self.c = self.solver.zeros()
        self.chp = self.solver.zeros() if self.spec.problem == "hp" else None
        self.q = float(self.weights @ self.c)
        self.t_step = 0
        self.done = False
        self.episode += 1
        self._log_rows = []
        return self.observation()

    def observation(self) -> np.ndarray:
        s = self.spec
        parts = [self._coarse(self.c)]
        if s.problem == "hp":
            parts.append(self._coarse(self.chp))
            parts.append(np.array(s.uniform_velocity, dtype=float))
        return np.concatenate(parts)

    def _coarse(self, u):
        return np.clip(self.coarse @ u / self.spec.obs_scale, 0.0, self.spec.obs_ceiling)

    def _action_value(self, action) -> float:
        a = float(np.clip(float(np.squeeze(action)), *self.bounds))
        if self.spec.action_quantum:
            a = round(a / self.spec.action_quantum) * self.spec.action_quantum
        return a

    def step(self, action):
        if self.done:
            raise RuntimeError("episode finished; call reset() first")
        s = self.spec
        a = self._action_value(action)
        if s.problem == "vortex":
            v = make_double_vortex(a, s.wx, s.wx, s.mesh.lx, s.mesh.ly)
            self.c = self.solver.step(v, self.c, self.src_c)
        else:
            self.c, self.chp = self.solver.step_coupled(self.velocity, self.c, self.chp,
                                                        self.src_c, s.hp_source(a))
        q_new = float(self.weights @ self.c)
        reward = interval_reward(self.q, q_new, s.dt)
        self.q = q_new
        self.t_step += 1
        self.done = self.t_step >= s.n_steps
        if self.log_dir is not None:
            self._log_rows.append((self.t_step, a, reward, self.done))
            if self.done:
                self._write_log()
        return self.observation(), reward, self.done

    def _write_log(self):
        self.log_dir.mkdir(parents=True, exist_ok=True)
        path = self.log_dir / f"episode_{self.episode:04d}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "action", "reward", "done"])
            for step, a, r, d in self._log_rows:
                w.writerow([step, repr(a), repr(r), int(d)])


class QuadraticBandit:
    """PDE-free sanity environment: reward ``-(action - target)^2``, constant observation."""

    def __init__(self, target: float = 3.0, bounds=(0.5, 7.5), obs_dim: int = 4,
                 episode_length: int = 100):
        self.target = target
        self.bounds = bounds
        self.obs_dim = obs_dim
        self.episode_length = episode_length
        self._obs = np.ones(obs_dim)

    def reset(self, seed=None):
        self.t_step = 0
        return self._obs.copy()

    def step(self, action):
        self.t_step += 1
        a = float(np.squeeze(action))
        done = self.t_step >= self.episode_length
        return self._obs.copy(), -(a - self.target) ** 2, done
