"""Backward-Euler P1 finite-element transport of pathogen and disinfectant.

Single species, per time step::

    (c' - c, w)/dt + (v . grad c', w) + K (grad c', grad w) + lam (c', w) = (f, w)

with natural (zero normal gradient) boundary conditions. The coupled system
adds the bilinear neutralisation sink ``alpha * c * c_hp`` to both species and
is linearised by Picard iteration.
"""
from __future__ import annotations

import logging
import weakref
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .flowfields import SourceSpec
from .mesh import Mesh

log = logging.getLogger(__name__)

PECLET_WARN = 5.0


class SolverError(RuntimeError):
    pass


class PicardError(SolverError):
    def __init__(self, iterations, change):
        super().__init__(f"Picard iteration did not converge: {iterations} iterations, "
                         f"last relative change {change:.3e}")
        self.iterations = iterations
        self.change = change


@dataclass(frozen=True)
class TransportParams:
    K: float = 0.022
    K_hp: float = 0.022
    lam: float = 0.0085
    lam_hp: float = 0.0085
    alpha1: float = 0.2
    alpha2: float = 0.2
    dt: float = 1.0
    streamline_diffusion: bool = False
    picard_tol: float = 1e-10
    picard_max_iter: int = 25

    def __post_init__(self):
        # K = 0 is allowed (pure advection/reaction); it is only a degenerate limit
        if self.K < 0 or self.K_hp < 0:
            raise ValueError("diffusivities must be non-negative")
        if self.lam < 0 or self.lam_hp < 0:
            raise ValueError("removal rates must be non-negative")
        if self.dt <= 0:
            raise ValueError("dt must be positive")


# --- local element integrals ------------------------------------------------

def advection_blocks(mesh: Mesh, vq: np.ndarray) -> np.ndarray:
    """(v . grad phi_j, phi_i) per cell with the mid-edge rule; vq is (nc, 3, 2)."""
    # phi_i at midpoint k is 0.5 for i != k
    phi = 0.5 * (1.0 - np.eye(3))
    vg = np.einsum("cqd,cjd->cqj", vq, mesh.grads)  # v(m_q) . grad phi_j
    return (mesh.areas / 3.0)[:, None, None] * np.einsum("qi,cqj->cij", phi, vg)


def streamline_blocks(mesh: Mesh, vq: np.ndarray, K: float) -> np.ndarray:
    vbar = vq.mean(axis=1)
    speed = np.linalg.norm(vbar, axis=1)
    h = np.sqrt(2.0 * mesh.areas)
    with np.errstate(divide="ignore", invalid="ignore"):
        pe = speed * h / (2.0 * K) if K > 0 else np.full_like(speed, np.inf)
        xi = np.where(pe > 1e-8, 1.0 / np.tanh(pe) - 1.0 / pe, 0.0)
        tau = np.where(speed > 0, h / (2.0 * speed) * xi, 0.0)
    vg = np.einsum("cd,cjd->cj", vbar, mesh.grads)
    return (mesh.areas * tau)[:, None, None] * vg[:, :, None] * vg[:, None, :]


_TRIPLE = np.empty((3, 3, 3))
for _i in range(3):
    for _j in range(3):
        for _k in range(3):
            _n = len({_i, _j, _k})
            _TRIPLE[_i, _j, _k] = {1: 1 / 10, 2: 1 / 30, 3: 1 / 60}[_n]


_WEIGHTED_MASS_MAPS = weakref.WeakKeyDictionary()


def _weighted_mass_map(mesh: Mesh) -> sp.csr_matrix:
    # linear map from nodal weights to the CSR data of the weighted mass matrix
    P = _WEIGHTED_MASS_MAPS.get(mesh)
    if P is None:
        indptr, indices, scatter = mesh._pattern()
        vals = mesh.areas[:, None, None, None] * _TRIPLE[None]  # (nc, i, j, k)
        rows = np.repeat(scatter, 3)
        cols = np.repeat(mesh.cells[:, None, :], 9, axis=1).ravel()
        P = sp.csr_matrix((vals.ravel(), (rows, cols)), shape=(len(indices), mesh.n_vertices))
        _WEIGHTED_MASS_MAPS[mesh] = P
    return P


def weighted_mass(mesh: Mesh, u: np.ndarray) -> sp.csr_matrix:
    """Exact P1 matrix of (u phi_j, phi_i) for a P1 weight ``u``."""
    indptr, indices, _ = mesh._pattern()
    n = mesh.n_vertices
    return sp.csr_matrix((_weighted_mass_map(mesh) @ u, indices, indptr), shape=(n, n))


def source_vector(mesh: Mesh, src: SourceSpec) -> np.ndarray:
    """(f, phi_i) with f sampled at the mid-edge quadrature points."""
    q = mesh.quadrature_points()
    fq = src(q[..., 0], q[..., 1])
    phi = 0.5 * (1.0 - np.eye(3))
    local = (mesh.areas / 3.0)[:, None] * (fq @ phi)
    return mesh.assemble_vector(local)


def cell_peclet(mesh: Mesh, vq: np.ndarray, K: float) -> float:
    vmax = float(np.max(np.linalg.norm(vq, axis=-1)))
    if K == 0:
        return np.inf if vmax > 0 else 0.0
    return vmax * mesh.h / (2.0 * K)


# --- operators ---------------------------------------------------------------

@dataclass(eq=False)
class AssembledOperator:
    """System matrix of one implicit step plus its lazily built factorisation."""

    matrix: sp.csr_matrix
    mass: sp.csr_matrix
    dt: float
    fingerprint: tuple
    _lu: object = field(default=None, repr=False)

    @property
    def shape(self):
        return self.matrix.shape

    def factor(self):
        if self._lu is None:
            try:
                self._lu = _factor(self.matrix)
            except RuntimeError as exc:
                raise SolverError(f"singular system for operator {self.fingerprint}: {exc}") from exc
        return self._lu

    def solve(self, rhs: np.ndarray, krylov: bool = False) -> np.ndarray:
        if krylov:
            x = _krylov_solve(self.matrix, rhs)
        else:
            x = self.factor().solve(rhs)
        _check_residual(self.matrix, x, rhs, self.fingerprint)
        return x


def _factor(A):
    return spla.splu(A.tocsc(), permc_spec="MMD_AT_PLUS_A")


def _krylov_solve(A, rhs):
    ilu = spla.spilu(A.tocsc(), drop_tol=1e-5)
    prec = spla.LinearOperator(A.shape, ilu.solve)
    x, info = spla.gmres(A, rhs, M=prec, rtol=1e-12, atol=0.0, restart=100, maxiter=500)
    if info != 0:
        raise SolverError(f"GMRES did not converge (info={info})")
    return x


def _check_residual(A, x, rhs, fingerprint, tol=1e-10):
    if not np.all(np.isfinite(x)):
        raise SolverError(f"non-finite solution for operator {fingerprint}")
    nb = np.linalg.norm(rhs)
    if nb > 0:
        res = np.linalg.norm(A @ x - rhs) / nb
        if res > tol:
            raise SolverError(f"linear solve residual {res:.2e} exceeds {tol:g} for {fingerprint}")


def assemble_step_operator(mesh: Mesh, velocity, params: TransportParams,
                           species: str = "c", warn: bool = True) -> AssembledOperator:
    """Build ``M/dt + A(v) + K S + lam M`` for one species ("c" or "hp")."""
    K, lam = (params.K, params.lam) if species == "c" else (params.K_hp, params.lam_hp)
    vq = velocity.cell_velocities(mesh)
    pe = cell_peclet(mesh, vq, K)
    if warn and pe > PECLET_WARN and not params.streamline_diffusion:
        log.warning("cell Peclet number %.2f exceeds %.0f without stabilisation", pe, PECLET_WARN)
    local = advection_blocks(mesh, vq)
    local += K * mesh.areas[:, None, None] * np.einsum("cik,cjk->cij", mesh.grads, mesh.grads)
    ref = (np.ones((3, 3)) + np.eye(3)) / 12.0
    local += (1.0 / params.dt + lam) * mesh.areas[:, None, None] * ref
    if params.streamline_diffusion:
        local += streamline_blocks(mesh, vq, K)
    fingerprint = (mesh.spec, velocity.key(), K, lam, params.dt, params.streamline_diffusion)
    return AssembledOperator(mesh.assemble(local), mesh.mass_matrix(), params.dt, fingerprint)


def step_single(op: AssembledOperator, c_prev: np.ndarray, source, mesh: Mesh | None = None,
                krylov: bool = False) -> np.ndarray:
    """Advance one species by one step. ``source`` is a SourceSpec or a load vector."""
    if len(c_prev) != op.shape[0]:
        raise ValueError("field length does not match operator dimension")
    b = source if isinstance(source, np.ndarray) else source_vector(mesh, source)
    rhs = op.mass @ c_prev / op.dt + b
    return op.solve(rhs, krylov=krylov)


def _l2(mass, u):
    return float(np.sqrt(max(u @ (mass @ u), 0.0)))


class ShiftedSolver:
    """Solves ``(A + alpha * W(u)) x = b`` for a fixed operator ``A`` and varying weights.

    A factorisation of some earlier shifted matrix is kept and used for
    defect-correction sweeps; it is refreshed only when the sweeps stop
    contracting fast enough. Successive Picard iterates and time steps change
    the shift only slightly, so most solves cost a few triangular solves.
    """

    max_sweeps = 6
    tol = 1e-12

    def __init__(self, op: AssembledOperator, alpha: float, mesh: Mesh):
        self.op = op
        self.alpha = alpha
        self.mesh = mesh
        self._lu = None
        self.n_factorizations = 0

    def matrix(self, weight):
        A = self.op.matrix.copy()
        if self.alpha != 0:
            A.data += self.alpha * (_weighted_mass_map(self.mesh) @ weight)
        return A

    def solve(self, weight, rhs, x0=None):
        A = self.matrix(weight)
        nb = np.linalg.norm(rhs)
        if self._lu is not None and nb > 0:
            x = self._lu.solve(rhs) if x0 is None else x0.copy()
            for _ in range(self.max_sweeps):
                r = rhs - A @ x
                if np.linalg.norm(r) <= self.tol * nb:
                    return x
                x += self._lu.solve(r)
            if np.linalg.norm(rhs - A @ x) <= self.tol * nb:
                return x
        try:
            self._lu = _factor(A)
        except RuntimeError as exc:
            raise SolverError(f"singular coupled system for {self.op.fingerprint}: {exc}") from exc
        self.n_factorizations += 1
        x = self._lu.solve(rhs)
        _check_residual(A, x, rhs, self.op.fingerprint)
        return x


def picard_coupled(op_c: AssembledOperator, op_hp: AssembledOperator, c_prev, chp_prev,
                   b_c, b_hp, mesh: Mesh, params: TransportParams, solvers=None):
    """Implicit coupled step. Returns ``(c, c_hp, iterations)``.

    Each sweep solves the pathogen equation with the disinfectant lagged, then
    the disinfectant equation with the freshly updated pathogen. ``solvers``
    is an optional ``(ShiftedSolver, ShiftedSolver)`` pair reused across steps.
    """
    a1, a2 = params.alpha1, params.alpha2
    M, dt = op_c.mass, op_c.dt
    rhs_c = M @ c_prev / dt + b_c
    rhs_hp = M @ chp_prev / dt + b_hp
    if a1 == 0 and a2 == 0:
        return op_c.solve(rhs_c), op_hp.solve(rhs_hp), 1
    if solvers is None:
        solvers = (ShiftedSolver(op_c, a1, mesh), ShiftedSolver(op_hp, a2, mesh))
    sc, shp = solvers

    c, chp = c_prev.copy(), chp_prev.copy()
    change = np.inf
    for it in range(1, params.picard_max_iter + 1):
        c_new = sc.solve(chp, rhs_c, c)
        chp_new = shp.solve(c_new, rhs_hp, chp)
        scale = max(1.0, _l2(M, c_new), _l2(M, chp_new))
        change = max(_l2(M, c_new - c), _l2(M, chp_new - chp)) / scale
        c, chp = c_new, chp_new
        if change < params.picard_tol:
            return c, chp, it
    raise PicardError(params.picard_max_iter, change)


def step_coupled(mesh: Mesh, velocity, params: TransportParams, c_prev, chp_prev,
                 src_c: SourceSpec, src_hp: SourceSpec):
    op_c = assemble_step_operator(mesh, velocity, params, "c")
    op_hp = assemble_step_operator(mesh, velocity, params, "hp")
    c, chp, _ = picard_coupled(op_c, op_hp, c_prev, chp_prev, source_vector(mesh, src_c),
                               source_vector(mesh, src_hp), mesh, params)
    return c, chp


# --- episode-level driver with operator caching ------------------------------

class TransportSolver:
    """Time stepper that caches assembled/factorised operators by fingerprint.

    Distinct instances share no mutable state and can run concurrently.
    """

    def __init__(self, mesh: Mesh, params: TransportParams, krylov: bool = False,
                 cache_size: int | None = None):
        self.mesh = mesh
        self.params = params
        self.krylov = krylov
        self.cache_size = cache_size
        self._ops: dict = {}
        self._sources: dict = {}
        self._shifted: dict = {}
        self.n_assemblies = 0
        self._warned = params.streamline_diffusion
        self.picard_iterations: list[int] = []

    def operator(self, velocity, species: str = "c") -> AssembledOperator:
        key = (velocity.key(), species)
        op = self._ops.get(key)
        if op is None:
            op = assemble_step_operator(self.mesh, velocity, self.params, species,
                                        warn=not self._warned)
            self._warned = self._warned or cell_peclet(self.mesh, velocity.cell_velocities(self.mesh),
                                                       self.params.K) > PECLET_WARN
            self.n_assemblies += 1
            if self.cache_size is not None and len(self._ops) >= self.cache_size:
                self._ops.pop(next(iter(self._ops)))
            self._ops[key] = op
        return op

    def load(self, src: SourceSpec) -> np.ndarray:
        b = self._sources.get(src)
        if b is None:
            b = self._sources[src] = source_vector(self.mesh, src)
        return b

    def clear_cache(self):
        self._ops.clear()
        self._shifted.clear()

    def step(self, velocity, c, src: SourceSpec) -> np.ndarray:
        return step_single(self.operator(velocity), c, self.load(src), krylov=self.krylov)

    def step_coupled(self, velocity, c, chp, src_c: SourceSpec, src_hp: SourceSpec):
        op_c = self.operator(velocity, "c")
        op_hp = self.operator(velocity, "hp")
        key = (op_c.fingerprint, op_hp.fingerprint)
        solvers = self._shifted.get(key)
        if solvers is None:
            solvers = self._shifted[key] = (ShiftedSolver(op_c, self.params.alpha1, self.mesh),
                                            ShiftedSolver(op_hp, self.params.alpha2, self.mesh))
        c, chp, its = picard_coupled(op_c, op_hp, c, chp, self.load(src_c), self.load(src_hp),
                                     self.mesh, self.params, solvers)
        self.picard_iterations.append(its)
        return c, chp

    def zeros(self) -> np.ndarray:
        return np.zeros(self.mesh.n_vertices)


def _n_steps(T, dt):
    n = T / dt
    if abs(n - round(n)) > 1e-9 or n < 1:
        raise ValueError(f"T={T} is not a positive multiple of dt={dt}")
    return int(round(n))


def run_episode_dynamics(mesh: Mesh, field_schedule, params: TransportParams, sources,
                         T: float, solver: TransportSolver | None = None):
    """Integrate from a clean room over ``[0, T]``.

    ``field_schedule`` is either one velocity field or a sequence with one field
    per step. ``sources`` is a single SourceSpec (pathogen only) or a pair
    ``(src_c, src_hp)`` for the coupled system. Returns the states at
    ``t = 0, dt, ..., T``: an array (n+1, nv), or a pair of such arrays for the
    coupled system.
    """
    n = _n_steps(T, params.dt)
    if not isinstance(field_schedule, (list, tuple)):
        field_schedule = [field_schedule] * n
    if len(field_schedule) != n:
        raise ValueError(f"schedule has {len(field_schedule)} entries, expected {n}")
    solver = solver or TransportSolver(mesh, params)
    coupled = isinstance(sources, (list, tuple))
    c = solver.zeros()
    states = [c]
    if not coupled:
        for v in field_schedule:
            c = solver.step(v, c, sources)
            states.append(c)
        return np.array(states)
    chp = solver.zeros()
    hp_states = [chp]
    for v in field_schedule:
        c, chp = solver.step_coupled(v, c, chp, *sources)
        states.append(c)
        hp_states.append(chp)
    return np.array(states), np.array(hp_states)


def with_params(params: TransportParams, **changes) -> TransportParams:
    return replace(params, **changes)
