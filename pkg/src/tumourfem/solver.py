"""Implicit time stepping of the lumped tumour scheme with Newton's method.

Unknowns of one step are stacked block-wise as ``[phi; mu; sigma]``.  The
mobility weights and the concave potential part are frozen at the previous
time level; everything else is implicit.
"""

from __future__ import annotations

import logging
import math
import warnings
import weakref
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.sparse.csgraph import reverse_cuthill_mckee

from .diagnostics import DiagnosticsLedger, accumulate_step
from .fem import P1Space
from .mesh import Marker, SimplicialMesh, evaluate_p1, mark_interface, refine
from .model import (
    AssumptionError,
    ModelParams,
    compute_dt_star,
    gamma_phi,
    gamma_phi_partials,
    gamma_sigma,
    gamma_sigma_partials,
    mobility_m,
    nutrient_mobility,
    psi1_prime,
    psi1_second,
    psi2_prime,
)

__all__ = [
    "StateTriple",
    "BoundaryData",
    "NewtonSettings",
    "StepReport",
    "AdaptPolicy",
    "Trajectory",
    "SolverError",
    "NewtonConvergenceError",
    "StabilityWarning",
    "build_initial_state",
    "build_boundary_data",
    "assemble_residual",
    "assemble_jacobian",
    "residual_norm",
    "newton_step_solve",
    "step",
    "transfer_state",
    "adapt_mesh",
    "run",
]

log = logging.getLogger(__name__)


class SolverError(RuntimeError):
    """The discrete system could not be solved."""


class NewtonConvergenceError(SolverError):
    def __init__(self, message: str, history: list):
        super().__init__(message)
        self.history = history


class StabilityWarning(UserWarning):
    """The time step exceeds the analytical stability bound."""


@dataclass(frozen=True)
class StateTriple:
    """Phase field, chemical potential and nutrient at one time level."""

    space: P1Space
    phi: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        for name in ("phi", "mu", "sigma"):
            v = np.asarray(getattr(self, name), dtype=float)
            if v.shape != (self.space.n,):
                raise ValueError(f"{name} has shape {v.shape}, expected ({self.space.n},)")
            object.__setattr__(self, name, v)

    @property
    def mesh(self) -> SimplicialMesh:
        return self.space.mesh

    def stacked(self) -> np.ndarray:
        return np.concatenate([self.phi, self.mu, self.sigma])

    def with_values(self, x: np.ndarray, time: Optional[float] = None) -> "StateTriple":
        n = self.space.n
        return StateTriple(self.space, x[:n].copy(), x[n:2 * n].copy(), x[2 * n:].copy(),
                           self.time if time is None else time)


@dataclass(frozen=True)
class BoundaryData:
    """Nodal far-field nutrient for one step, used on Robin facets."""

    values: np.ndarray
    t_prev: float = 0.0
    t_next: float = 0.0


@dataclass(frozen=True)
class NewtonSettings:
    abs_tol: float = 1e-10
    rel_tol: float = 1e-12
    max_iter: int = 30
    damping: float = 0.5
    max_damping_steps: int = 5

    def __post_init__(self):
        if not (self.abs_tol > 0 and self.rel_tol > 0):
            raise ValueError("Newton tolerances must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if not 0 < self.damping <= 1:
            raise ValueError("damping factor must lie in (0, 1]")


@dataclass
class StepReport:
    iterations: int
    residual: float
    history: list
    linear_solves: int = 0
    damped: int = 0


# -- data builders ----------------------------------------------------------------


def build_initial_state(phi0, sigma0, space: P1Space, params: ModelParams, time: float = 0.0) -> StateTriple:
    """Initial triple: nodal interpolation of ``phi0`` and Clement interpolation of ``sigma0``.

    The chemical potential solves the lumped potential equation for the
    initial phase field and nutrient, with the full potential derivative.
    """
    phi = space.nodal_interpolate(phi0)
    sigma = space.clement_interpolate(sigma0)
    A = params.A
    mu = (A * (psi1_prime(phi, params) + psi2_prime(phi)) - params.chi_phi * sigma
          + params.B * (space.stiffness @ phi) / space.lumped_mass)
    return StateTriple(space, phi, mu, sigma, time)


def build_boundary_data(sigma_inf, t_prev: float, t_next: float, space: P1Space, n_time: int = 1) -> BoundaryData:
    """Time average of the Clement interpolant of ``sigma_inf(t, x)`` over a step.

    ``sigma_inf`` may be a constant.  The time average uses an ``n_time``
    point Gauss-Legendre rule; the default midpoint rule is exact for data
    affine in time.
    """
    if not t_prev < t_next:
        raise ValueError("t_prev must be smaller than t_next")
    if np.isscalar(sigma_inf):
        return BoundaryData(np.full(space.n, float(sigma_inf)), t_prev, t_next)
    nodes, weights = np.polynomial.legendre.leggauss(n_time)
    ts = 0.5 * (t_prev + t_next) + 0.5 * (t_next - t_prev) * nodes
    vals = sum(0.5 * w * space.clement_interpolate(lambda x, t=t: sigma_inf(t, x)) for t, w in zip(ts, weights))
    return BoundaryData(np.asarray(vals, dtype=float), t_prev, t_next)


# -- residual and Jacobian -----------------------------------------------------------


def _check_pair(new: StateTriple, old: StateTriple, dt: float):
    if not dt > 0:
        raise ValueError(f"time step must be positive, got {dt}")
    if new.space is not old.space:
        raise ValueError("new and old states must share one finite element space")


def _nutrient_stiffness(space: P1Space, old: StateTriple, params: ModelParams):
    """Stiffness acting on sigma and on phi in the nutrient equation."""
    if params.nutrient_mode == "constant_inverse":
        K = space.stiffness
        return K, params.eta * K
    Kn = space.assemble_stiffness(nutrient_mobility(old.phi, params))
    return params.chi_sigma * Kn, params.chi_phi * Kn


def _robin_mass(space: P1Space, params: ModelParams):
    return params.K * space.boundary_mass(Marker.ROBIN)


def assemble_residual(new: StateTriple, old: StateTriple, dt: float, params: ModelParams,
                      bc: BoundaryData) -> np.ndarray:
    """Residual of the three lumped equations, stacked as ``[phi; mu; sigma]``."""
    _check_pair(new, old, dt)
    V = new.space
    w = V.lumped_mass
    phi, mu, sigma = new.phi, new.mu, new.sigma
    Km = V.assemble_stiffness(mobility_m(old.phi, params))
    Ks, Kp = _nutrient_stiffness(V, old, params)
    r_phi = w * ((phi - old.phi) / dt - gamma_phi(phi, sigma, params)) + Km @ mu
    r_mu = (w * (mu - params.A * psi1_prime(phi, params) - params.A * psi2_prime(old.phi)
                 + params.chi_phi * sigma) - params.B * (V.stiffness @ phi))
    r_sigma = (w * ((sigma - old.sigma) / dt + gamma_sigma(phi, sigma, params))
               + Ks @ sigma - Kp @ phi + _robin_mass(V, params) * (sigma - bc.values))
    return np.concatenate([r_phi, r_mu, r_sigma])


class _BlockLayout:
    """Fixed CSR layout of the 3x3 block Jacobian on one space.

    Blocks are either on the stiffness pattern (``"S"``) or diagonal
    (``"D"``).  The layout is symmetric as a pattern.  ``perm`` interleaves
    the three unknowns of each vertex, visiting vertices in reverse
    Cuthill-McKee order.
    """

    KINDS = (("D", "S", "S"), ("S", "D", "D"), ("S", "D", "S"))

    def __init__(self, space: P1Space):
        n = space.n
        s_ptr = space._indptr.astype(np.int64)
        s_idx = space._indices.astype(np.int64)
        s_len = np.diff(s_ptr)
        s_row = np.repeat(np.arange(n), s_len)
        self.diag_pos = np.flatnonzero(s_idx == s_row)
        lens = {"S": s_len, "D": np.ones(n, np.int64)}
        row_len = np.concatenate([sum(lens[k] for k in kinds) for kinds in self.KINDS])
        self.indptr = np.concatenate([[0], np.cumsum(row_len)])
        nnz = int(self.indptr[-1])
        self.indices = np.empty(nnz, np.int64)
        self.dest = {}
        for b, kinds in enumerate(self.KINDS):
            offset = self.indptr[b * n:(b + 1) * n].copy()
            for c, kind in enumerate(kinds):
                if kind == "S":
                    d = offset[s_row] + (np.arange(len(s_idx)) - s_ptr[s_row])
                    self.indices[d] = s_idx + c * n
                else:
                    d = offset.copy()
                    self.indices[d] = np.arange(n) + c * n
                self.dest[(b, c)] = d
                offset = offset + lens[kind]
        self.n = n
        self.nnz = nnz
        order = reverse_cuthill_mckee(space.stiffness, symmetric_mode=True).astype(np.int64)
        self.perm = np.stack([order, order + n, order + 2 * n], axis=1).ravel()
        self.indices = self.indices.astype(np.int32)
        self.indptr = self.indptr.astype(np.int32)

    def assemble(self, blocks: dict) -> sp.csr_matrix:
        data = np.zeros(self.nnz)
        for key, values in blocks.items():
            data[self.dest[key]] = values
        return sp.csr_matrix((data, self.indices, self.indptr), shape=(3 * self.n, 3 * self.n))


_layouts: "weakref.WeakKeyDictionary[P1Space, _BlockLayout]" = weakref.WeakKeyDictionary()


def _layout(space: P1Space) -> _BlockLayout:
    if space not in _layouts:
        _layouts[space] = _BlockLayout(space)
    return _layouts[space]


def assemble_jacobian(new: StateTriple, old: StateTriple, dt: float, params: ModelParams,
                      bc: Optional[BoundaryData] = None) -> sp.csr_matrix:
    """Derivative of :func:`assemble_residual` with respect to the new unknowns.

    The sparsity pattern is symmetric; entries that vanish for the given
    parameters are stored as explicit zeros.
    """
    _check_pair(new, old, dt)
    V = new.space
    lay = _layout(V)
    w = V.lumped_mass
    phi, sigma = new.phi, new.sigma
    Km = V.assemble_stiffness(mobility_m(old.phi, params))
    Ks, Kp = _nutrient_stiffness(V, old, params)
    gpr, gps = gamma_phi_partials(phi, sigma, params)
    gsr, gss = gamma_sigma_partials(phi, sigma, params)

    def on_pattern(K, diag=None, scale=1.0):
        data = scale * K.data
        if diag is not None:
            data = data.copy()
            data[lay.diag_pos] += diag
        return data

    zero = np.zeros(V.n)
    blocks = {
        (0, 0): w / dt - w * gpr,
        (0, 1): on_pattern(Km),
        (0, 2): on_pattern(V.stiffness, -w * gps, scale=0.0),
        (1, 0): on_pattern(V.stiffness, -params.A * w * psi1_second(phi, params), scale=-params.B),
        (1, 1): w,
        (1, 2): params.chi_phi * w,
        (2, 0): on_pattern(Kp, w * gsr, scale=-1.0),
        (2, 1): zero,
        (2, 2): on_pattern(Ks, w / dt + w * gss + _robin_mass(V, params)),
    }
    return lay.assemble(blocks)


def _factorize(J: sp.csr_matrix, space: P1Space):
    """Solver for ``J dx = b`` by sparse LU.

    Unknowns are interleaved per vertex in reverse Cuthill-McKee order and
    factorised without pivoting under a minimum degree ordering of
    ``J + J^T``, which keeps the fill low on the coupled system; if that
    factorisation fails or solves inaccurately, partial pivoting is used.
    """
    perm = _layout(space).perm
    P = J[perm][:, perm].tocsc()
    try:
        lu = spla.splu(P, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                       options=dict(SymmetricMode=True))
    except RuntimeError:
        lu = None

    def solve(b):
        nonlocal lu
        bp = b[perm]
        if lu is not None:
            y = lu.solve(bp)
            if np.all(np.isfinite(y)) and np.linalg.norm(P @ y - bp) <= 1e-8 * max(np.linalg.norm(bp), 1e-300):
                return _unpermute(y, perm)
        lu = spla.splu(P)
        return _unpermute(lu.solve(bp), perm)

    return solve


def _unpermute(y, perm):
    x = np.empty_like(y)
    x[perm] = y
    return x


def residual_norm(r: np.ndarray, space: P1Space, dt: float) -> float:
    """Lumped dual norm of a residual, with the evolution rows scaled by ``dt``.

    Scaling by ``dt`` turns the evolution rows into increments, which keeps the
    norm away from round-off for small steps.
    """
    n = space.n
    w = space.lumped_mass
    s = np.concatenate([r[:n] * dt, r[n:2 * n], r[2 * n:] * dt])
    return math.sqrt(float(np.sum(s * s / np.tile(w, 3))))


# -- Newton -------------------------------------------------------------------------


def newton_step_solve(guess: StateTriple, old: StateTriple, dt: float, params: ModelParams,
                      bc: BoundaryData, settings: NewtonSettings = NewtonSettings()):
    """Damped Newton iteration for one time level.

    The step is halved (by ``settings.damping``) while the residual norm grows,
    at most ``max_damping_steps`` times.

    Returns
    -------
    state : StateTriple
    report : StepReport

    Raises
    ------
    NewtonConvergenceError
        If the tolerance is not reached within ``max_iter`` iterations.
    SolverError
        If a Jacobian is singular or the iterate stops being finite.
    """
    V = old.space
    x = guess.stacked()
    time = old.time + dt

    def res(x):
        return assemble_residual(guess.with_values(x), old, dt, params, bc)

    r = res(x)
    norm = residual_norm(r, V, dt)
    history = [norm]
    target = max(settings.abs_tol, settings.rel_tol * norm)
    report = StepReport(0, norm, history)
    if norm <= settings.abs_tol:
        return guess.with_values(x, time), report
    for it in range(1, settings.max_iter + 1):
        J = assemble_jacobian(guess.with_values(x), old, dt, params, bc)
        try:
            dx = _factorize(J, V)(-r)
        except RuntimeError as exc:
            raise SolverError(f"singular Newton matrix ({exc}); the step {dt:g} may be too large "
                              "or the parameters may violate the modelling assumptions") from exc
        report.linear_solves += 1
        lam = 1.0
        x_new = x + dx
        r_new = res(x_new)
        norm_new = residual_norm(r_new, V, dt)
        tries = 0
        while not norm_new < norm and tries < settings.max_damping_steps:
            lam *= settings.damping
            x_new = x + lam * dx
            r_new = res(x_new)
            norm_new = residual_norm(r_new, V, dt)
            tries += 1
        report.damped += tries
        if not np.all(np.isfinite(x_new)):
            raise SolverError("Newton iterate is not finite")
        x, r, norm = x_new, r_new, norm_new
        history.append(norm)
        report.iterations, report.residual = it, norm
        if norm <= target:
            return guess.with_values(x, time), report
    raise NewtonConvergenceError(
        f"Newton did not converge in {settings.max_iter} iterations (residual {norm:.3e})", history)


@lru_cache(maxsize=64)
def _dt_star(params: ModelParams) -> float:
    try:
        return compute_dt_star(params).dt_star
    except AssumptionError:
        return math.nan


def step(old: StateTriple, dt: float, params: ModelParams, bc: BoundaryData,
         settings: NewtonSettings = NewtonSettings()):
    """Advance one time level, starting Newton from the old state."""
    bound = _dt_star(params)
    if not dt < bound:
        warnings.warn(f"time step {dt:g} is not below the stability bound {bound:g}", StabilityWarning,
                      stacklevel=2)
    return newton_step_solve(old, old, dt, params, bc, settings)


# -- adaptivity -----------------------------------------------------------------------


@dataclass(frozen=True)
class AdaptPolicy:
    """Interface-driven refinement of a base mesh.

    Every ``every`` steps the mesh is rebuilt from ``base`` by repeatedly
    refining the cells near the interface of the current phase field, down to
    diameter ``h_min``.  Rebuilding from the base coarsens regions the
    interface has left.
    """

    base: SimplicialMesh
    h_min: float
    every: int = 10
    threshold: float = 0.95
    detect_crossings: bool = True
    max_levels: int = 12

    def __post_init__(self):
        if self.every < 1:
            raise ValueError("adaptivity cadence must be at least one step")
        if not self.h_min > 0:
            raise ValueError("h_min must be positive")


def adapt_mesh(policy: AdaptPolicy, phi_at: Callable[[np.ndarray], np.ndarray]) -> SimplicialMesh:
    """Refine ``policy.base`` where ``phi_at`` (a pointwise evaluator) shows the interface."""
    mesh = policy.base
    for _ in range(policy.max_levels):
        marks = mark_interface(mesh, phi_at(mesh.vertices), policy.threshold,
                               detect_crossings=policy.detect_crossings, h_min=policy.h_min)
        if not marks:
            break
        mesh = refine(mesh, marks)
    return mesh


def transfer_state(state: StateTriple, space: P1Space) -> StateTriple:
    """Evaluate the P1 fields of ``state`` at the vertices of another mesh."""
    pts = space.mesh.vertices
    src = state.space.mesh
    return StateTriple(space, evaluate_p1(src, state.phi, pts), evaluate_p1(src, state.mu, pts),
                       evaluate_p1(src, state.sigma, pts), state.time)


# -- driver ----------------------------------------------------------------------------


@dataclass
class Trajectory:
    """States of a run together with its step size and diagnostics.

    ``states`` holds every state when the run keeps all of them, otherwise
    only the snapshots listed in ``snapshot_steps``.
    """

    dt: float
    states: list
    times: list
    ledger: DiagnosticsLedger
    reports: list = field(default_factory=list)
    snapshot_steps: list = field(default_factory=list)

    @property
    def space(self) -> P1Space:
        return self.states[-1].space

    @property
    def final(self) -> StateTriple:
        return self.states[-1]


def _n_steps(T: float, dt: float) -> int:
    return max(1, math.ceil(T / dt - 1e-9))


def run(initial: StateTriple, T: float, dt: float, params: ModelParams, sigma_inf=1.0,
        settings: NewtonSettings = NewtonSettings(), adapt: Optional[AdaptPolicy] = None,
        final_step: str = "shorten", keep: str = "all", snapshot_every: Optional[int] = None,
        callback: Optional[Callable] = None) -> Trajectory:
    """Run the scheme from ``initial.time`` over a horizon ``T``.

    Parameters
    ----------
    sigma_inf : float or callable
        Far-field nutrient, a constant or ``sigma_inf(t, x)``.
    final_step : {"shorten", "uniform"}
        ``ceil(T/dt)`` steps are taken; ``shorten`` cuts the last one to land
        on ``T``, ``uniform`` keeps every step equal to ``dt``.
    keep : {"all", "snapshots", "none"}
        Which states to retain in the trajectory.  The final state is always
        kept.
    snapshot_every : int, optional
        Snapshot cadence in steps; defaults to about 20 snapshots per run.
    callback : callable, optional
        Called as ``callback(k, old, new, report)`` after step ``k``.
    """
    if not T > 0 or not dt > 0:
        raise ValueError("T and dt must be positive")
    if final_step not in ("shorten", "uniform"):
        raise ValueError("final_step must be 'shorten' or 'uniform'")
    if keep not in ("all", "snapshots", "none"):
        raise ValueError("keep must be 'all', 'snapshots' or 'none'")
    n_steps = _n_steps(T, dt)
    every = snapshot_every or max(1, n_steps // 20)
    t0 = initial.time
    state = initial
    ledger = DiagnosticsLedger().start(state.space, state, params, t0)
    traj = Trajectory(dt, [state], [t0], ledger, snapshot_steps=[0])
    if keep == "none":
        traj.states, traj.times, traj.snapshot_steps = [], [], []
    bound = _dt_star(params)
    if not dt < bound:
        warnings.warn(f"time step {dt:g} is not below the stability bound {bound:g}", StabilityWarning,
                      stacklevel=2)
    for k in range(1, n_steps + 1):
        if adapt is not None and (k - 1) % adapt.every == 0 and k > 1:
            cur = state
            mesh = adapt_mesh(adapt, lambda pts: evaluate_p1(cur.space.mesh, cur.phi, pts))
            if mesh.n_vertices != cur.space.n or not np.array_equal(mesh.cells, cur.space.mesh.cells):
                state = transfer_state(cur, P1Space(mesh))
        h = dt
        if final_step == "shorten" and k == n_steps:
            h = (t0 + T) - state.time
            if h <= 1e-12 * dt:
                h = dt
        bc = build_boundary_data(sigma_inf, state.time, state.time + h, state.space)
        try:
            new, report = newton_step_solve(state, state, h, params, bc, settings)
        except NewtonConvergenceError as exc:
            raise NewtonConvergenceError(f"step {k} (t = {state.time + h:g}): {exc}", exc.history) from exc
        except SolverError as exc:
            raise SolverError(f"step {k} (t = {state.time + h:g}): {exc}") from exc
        last = final_step == "shorten" and k == n_steps
        new = replace(new, time=t0 + (T if last else k * dt))
        accumulate_step(ledger, state, new, h, params, report.iterations, report.residual)
        traj.reports.append(report)
        if callback is not None:
            callback(k, state, new, report)
        state = new
        snap = k % every == 0 or k == n_steps
        if keep == "all" or (keep == "snapshots" and snap):
            traj.states.append(state)
            traj.times.append(state.time)
            traj.snapshot_steps.append(k)
        elif keep == "none" and k == n_steps:
            traj.states.append(state)
            traj.times.append(state.time)
            traj.snapshot_steps.append(k)
    return traj
