"""Energy, stability bookkeeping, space-time error norms and convergence orders.

Functions here work on anything with ``phi``, ``mu``, ``sigma`` and ``space``
attributes, so they accept :class:`tumourfem.solver.StateTriple` without
importing the solver.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .fem import P1Space
from .mesh import Marker, evaluate_p1, is_nested
from .model import ModelParams, psi

__all__ = [
    "NORM_KINDS",
    "FIELDS",
    "discrete_energy",
    "initial_bounds",
    "DiagnosticsLedger",
    "accumulate_step",
    "ErrorAccumulator",
    "bochner_error",
    "ErrorTable",
    "eoc",
    "higher_order_ledger",
    "dual_norm",
    "interface_radii",
    "anisotropy_indicator",
]

NORM_KINDS = ("LinfL2", "L2L2", "L2H1semi")
FIELDS = ("phi", "mu", "sigma")


def discrete_energy(space: P1Space, phi, sigma, params: ModelParams, shift: bool = False) -> float:
    """Lumped free energy of a phase field and nutrient pair.

    ``B/2 |grad phi|^2`` is integrated exactly; the potential, nutrient and
    chemotaxis densities use nodal quadrature.  ``shift`` adds ``1/4`` to the
    potential so the untruncated well has minimum zero.
    """
    phi = np.asarray(phi, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    density = (params.A * psi(phi, params, shift=shift) + 0.5 * params.chi_sigma * sigma**2
               + params.chi_phi * sigma * (1.0 - phi))
    return 0.5 * params.B * space.seminorm_h1(phi) ** 2 + float(np.dot(space.lumped_mass, density))


def initial_bounds(space: P1Space, phi, sigma, params: ModelParams) -> dict:
    """Quantities that must stay bounded under refinement for admissible initial data."""
    return {
        "potential": float(np.dot(space.lumped_mass, psi(phi, params, shift=True))),
        "phi_H1_sq": space.norm_h(phi) ** 2 + space.seminorm_h1(phi) ** 2,
        "lap_phi_sq": space.norm_h(space.discrete_laplacian(phi)) ** 2,
        "sigma_H1_sq": space.norm_h(sigma) ** 2 + space.seminorm_h1(sigma) ** 2,
        "energy": discrete_energy(space, phi, sigma, params),
    }


# -- stability ledger --------------------------------------------------------------

_RECORD_KEYS = (
    "time", "dt", "energy", "phi_h2", "grad_phi2", "sigma_h2",
    "inc_grad_phi", "inc_sigma", "dt_mu_h", "dt_grad_mu", "dt_grad_sigma",
    "dt_sigma_boundary", "dt_lap_phi", "newton_iterations", "residual",
    "n_vertices",
)


@dataclass
class DiagnosticsLedger:
    """Per-step stability quantities.

    The ``inc_*`` and ``dt_*`` columns are running sums, so each is
    nondecreasing.  ``initial`` holds the same pointwise quantities for the
    initial state.
    """

    records: dict = field(default_factory=lambda: {k: [] for k in _RECORD_KEYS})
    initial: dict = field(default_factory=dict)
    boundary_marker: Optional[Marker] = Marker.ROBIN

    def __len__(self) -> int:
        return len(self.records["time"])

    def column(self, key: str) -> np.ndarray:
        return np.asarray(self.records[key], dtype=float)

    def last(self, key: str, default: float = 0.0) -> float:
        col = self.records[key]
        return col[-1] if col else default

    def start(self, space: P1Space, state, params: ModelParams, time: float = 0.0) -> "DiagnosticsLedger":
        self.initial = {
            "time": time,
            "energy": discrete_energy(space, state.phi, state.sigma, params),
            "phi_h2": space.norm_h(state.phi) ** 2,
            "grad_phi2": space.seminorm_h1(state.phi) ** 2,
            "sigma_h2": space.norm_h(state.sigma) ** 2,
            "n_vertices": space.n,
        }
        return self

    def aggregate(self, steps: Optional[int] = None) -> float:
        """Left-hand side of the discrete stability estimate.

        Parameters
        ----------
        steps : int, optional
            Restrict to the first ``steps`` recorded steps (default all).
        """
        n = len(self) if steps is None else min(int(steps), len(self))
        if n <= 0:
            return 0.0
        pointwise = (self.column("phi_h2") + self.column("grad_phi2") + self.column("sigma_h2"))[:n]
        sums = ("inc_grad_phi", "inc_sigma", "dt_mu_h", "dt_grad_mu", "dt_grad_sigma", "dt_sigma_boundary")
        return float(pointwise.max() + sum(self.records[k][n - 1] for k in sums))

    def energy_increases(self, tol: float = 1e-10) -> list:
        """Step indices at which the energy rose by more than ``tol``."""
        e = np.concatenate([[self.initial.get("energy", np.nan)], self.column("energy")])
        return [int(i) for i in np.nonzero(np.diff(e) > tol)[0]]

    def rows(self):
        """Table rows: the initial state first, then one row per step."""
        keys = _RECORD_KEYS
        init = [self.initial.get(k, 0.0) for k in keys]
        init[keys.index("dt")] = 0.0
        yield keys
        yield init
        for i in range(len(self)):
            yield [self.records[k][i] for k in keys]


def accumulate_step(ledger: DiagnosticsLedger, old, new, dt: float, params: ModelParams,
                    newton_iterations: int = 0, residual: float = 0.0) -> DiagnosticsLedger:
    """Append the stability quantities of one step ``old -> new``."""
    space = new.space
    if old.space is not space and not (old.space.n == space.n and np.array_equal(
            old.space.mesh.vertices, space.mesh.vertices)):
        raise ValueError("old and new states live on different meshes; transfer the old state first")
    r = ledger.records
    dphi = new.phi - old.phi
    dsig = new.sigma - old.sigma
    r["time"].append(float(new.time))
    r["dt"].append(float(dt))
    r["energy"].append(discrete_energy(space, new.phi, new.sigma, params))
    r["phi_h2"].append(space.norm_h(new.phi) ** 2)
    r["grad_phi2"].append(space.seminorm_h1(new.phi) ** 2)
    r["sigma_h2"].append(space.norm_h(new.sigma) ** 2)
    r["inc_grad_phi"].append(ledger.last("inc_grad_phi") + space.seminorm_h1(dphi) ** 2)
    r["inc_sigma"].append(ledger.last("inc_sigma") + space.norm_h(dsig) ** 2)
    r["dt_mu_h"].append(ledger.last("dt_mu_h") + dt * space.norm_h(new.mu) ** 2)
    r["dt_grad_mu"].append(ledger.last("dt_grad_mu") + dt * space.seminorm_h1(new.mu) ** 2)
    r["dt_grad_sigma"].append(ledger.last("dt_grad_sigma") + dt * space.seminorm_h1(new.sigma) ** 2)
    r["dt_sigma_boundary"].append(
        ledger.last("dt_sigma_boundary") + dt * space.norm_boundary_h(new.sigma, ledger.boundary_marker) ** 2)
    r["dt_lap_phi"].append(ledger.last("dt_lap_phi") + dt * space.norm_h(space.discrete_laplacian(new.phi)) ** 2)
    r["newton_iterations"].append(int(newton_iterations))
    r["residual"].append(float(residual))
    r["n_vertices"].append(space.n)
    return ledger


# -- space-time errors ---------------------------------------------------------------


class ErrorAccumulator:
    """Streaming space-time errors of a coarse trajectory against a reference.

    The coarse trajectory is extended piecewise constantly in time, taking the
    value of step ``n`` on ``(t_{n-1}, t_n]``, and prolonged to the reference
    mesh by exact evaluation of its P1 functions.  Feed the reference states
    one step at a time through :meth:`add`.

    Parameters
    ----------
    coarse_space, ref_space : P1Space
        Coarse and reference spaces; the coarse mesh must be nested in the
        reference mesh.
    coarse_states : sequence
        Coarse states ``0..N`` with uniform step ``coarse_dt``.
    coarse_dt, ref_dt : float
        Step sizes; ``coarse_dt`` must be an integer multiple of ``ref_dt``.
    T : float
        Final time; time weights are cut at ``T``.
    """

    def __init__(self, coarse_space: P1Space, ref_space: P1Space, coarse_states: Sequence,
                 coarse_dt: float, ref_dt: float, T: float, fields: Iterable[str] = FIELDS):
        ratio = coarse_dt / ref_dt
        if ratio < 1 - 1e-12 or abs(ratio - round(ratio)) > 1e-9 * ratio:
            raise ValueError(f"coarse step {coarse_dt} is not an integer multiple of the reference step {ref_dt}")
        if not is_nested(coarse_space.mesh, ref_space.mesh):
            raise ValueError("coarse mesh is not nested in the reference mesh")
        self.ratio = int(round(ratio))
        self.coarse_space = coarse_space
        self.ref_space = ref_space
        self.coarse_states = coarse_states
        self.ref_dt = ref_dt
        self.T = T
        self.fields = tuple(fields)
        self._cached = (None, None)
        self.sq = {(f, k): 0.0 for f in self.fields for k in NORM_KINDS}
        self.steps = 0

    def _prolonged(self, n: int) -> dict:
        if self._cached[0] != n:
            if n >= len(self.coarse_states):
                raise ValueError(f"coarse trajectory ends before reference step needs coarse state {n}")
            s = self.coarse_states[n]
            pts = self.ref_space.mesh.vertices
            vals = {f: evaluate_p1(self.coarse_space.mesh, getattr(s, f), pts) for f in self.fields}
            self._cached = (n, vals)
        return self._cached[1]

    def add(self, k: int, ref_state) -> None:
        """Account for reference step ``k >= 1`` covering ``((k-1) dt, k dt]``."""
        t0 = (k - 1) * self.ref_dt
        if t0 >= self.T - 1e-14 * max(self.T, 1.0):
            return
        weight = min(k * self.ref_dt, self.T) - t0
        n = (k + self.ratio - 1) // self.ratio
        coarse = self._prolonged(n)
        V = self.ref_space
        for f in self.fields:
            diff = coarse[f] - getattr(ref_state, f)
            l2 = V.norm_h(diff) ** 2
            self.sq[(f, "LinfL2")] = max(self.sq[(f, "LinfL2")], l2)
            self.sq[(f, "L2L2")] += weight * l2
            self.sq[(f, "L2H1semi")] += weight * V.seminorm_h1(diff) ** 2
        self.steps += 1

    def result(self) -> dict:
        return {f"{f}_{k}": math.sqrt(v) for (f, k), v in self.sq.items()}


def bochner_error(coarse_traj, ref_traj, norm_kind: str, field: str = "phi", T: Optional[float] = None) -> float:
    """Space-time error of a coarse trajectory against a reference trajectory.

    Both trajectories need ``space``, ``dt`` and ``states`` attributes with
    uniform time steps starting at the same initial time.
    """
    if norm_kind not in NORM_KINDS:
        raise ValueError(f"norm_kind must be one of {NORM_KINDS}")
    if T is None:
        T = min(coarse_traj.dt * (len(coarse_traj.states) - 1), ref_traj.dt * (len(ref_traj.states) - 1))
    acc = ErrorAccumulator(coarse_traj.space, ref_traj.space, coarse_traj.states, coarse_traj.dt,
                           ref_traj.dt, T, fields=(field,))
    for k in range(1, len(ref_traj.states)):
        acc.add(k, ref_traj.states[k])
    return acc.result()[f"{field}_{norm_kind}"]


def eoc(errors: Sequence[float], hs: Sequence[float]):
    """Experimental orders of convergence.

    Returns
    -------
    last : float
        Order from the last pair of levels.
    orders : ndarray
        Orders of every consecutive pair.
    """
    e = np.asarray(errors, dtype=float)
    h = np.asarray(hs, dtype=float)
    if e.shape != h.shape or e.size < 2:
        raise ValueError("need at least two errors with matching mesh sizes")
    if np.any(~(e > 0)):
        raise ValueError("errors must be positive; identical levels give zero error and no order")
    if np.any(np.diff(h) >= 0):
        raise ValueError("mesh sizes must be strictly decreasing")
    orders = np.log(e[:-1] / e[1:]) / np.log(h[:-1] / h[1:])
    return float(orders[-1]), orders


@dataclass
class ErrorTable:
    """Errors per level in every norm, with their convergence orders."""

    hs: list
    dts: list
    errors: dict

    def eoc(self) -> dict:
        return {name: eoc(vals, self.hs)[0] for name, vals in self.errors.items()}

    def rows(self):
        names = list(self.errors)
        yield ["h", "dt"] + names
        for i, (h, dt) in enumerate(zip(self.hs, self.dts)):
            yield [h, dt] + [self.errors[n][i] for n in names]
        if len(self.hs) >= 2:
            orders = self.eoc()
            yield ["EOC", ""] + [orders[n] for n in names]


# -- higher-order bounds ---------------------------------------------------------------


def dual_norm(space: P1Space, v) -> float:
    """Discrete dual norm ``sup <v, z>_h / |z|_{H^1}`` over the finite element space."""
    w = space.lumped_mass
    wv = w * np.asarray(v, dtype=float)
    A = (space.stiffness + sp.diags(w)).tocsc()
    return math.sqrt(max(float(wv @ spla.spsolve(A, wv)), 0.0))


def higher_order_ledger(space: P1Space, states: Sequence, dt: float, lags=(1, 2, 4)) -> dict:
    """Sums controlled by the higher-order a priori bounds on a fixed mesh.

    Returns ``dt * sum |Lap_h phi^n|_h^2`` (also restricted to interior
    vertices), the dual-norm sums of the difference quotients, and the time
    translation sums divided by ``l dt`` for each lag ``l``.
    """
    interior = np.ones(space.n, bool)
    interior[np.unique(space.mesh.boundary_facets)] = False
    w = space.lumped_mass
    lap_full = lap_int = dq_phi = dq_sigma = 0.0
    for n in range(1, len(states)):
        lap = space.discrete_laplacian(states[n].phi)
        lap_full += dt * float(np.dot(w, lap**2))
        lap_int += dt * float(np.dot(w[interior], lap[interior] ** 2))
        dq_phi += dt * dual_norm(space, (states[n].phi - states[n - 1].phi) / dt) ** 2
        dq_sigma += dt * dual_norm(space, (states[n].sigma - states[n - 1].sigma) / dt) ** 2
    out = {"lap_phi": lap_full, "lap_phi_interior": lap_int,
           "dq_phi_dual": dq_phi, "dq_sigma_dual": dq_sigma}
    N = len(states) - 1
    for lag in lags:
        total = sum(space.norm_h(states[n + lag].phi - states[n].phi) ** 2 for n in range(0, N - lag + 1))
        out[f"translation_{lag}"] = dt * total / (lag * dt)
    return out


# -- interface shape -------------------------------------------------------------------


def interface_radii(space: P1Space, phi, centre=(0.0, 0.0)) -> np.ndarray:
    """Distances from ``centre`` of the zero crossings of ``phi`` along mesh edges."""
    mesh = space.mesh
    cells = mesh.cells
    d = mesh.dim
    pairs = [(i, j) for i in range(d + 1) for j in range(i + 1, d + 1)]
    edges = np.unique(np.sort(np.concatenate([cells[:, [i, j]] for i, j in pairs]), axis=1), axis=0)
    a, b = edges[:, 0], edges[:, 1]
    pa, pb = phi[a], phi[b]
    cross = (pa * pb < 0) | ((pa == 0) & (pb != 0))
    a, b, pa, pb = a[cross], b[cross], pa[cross], pb[cross]
    t = pa / (pa - pb)
    pts = mesh.vertices[a] + t[:, None] * (mesh.vertices[b] - mesh.vertices[a])
    return np.linalg.norm(pts - np.asarray(centre, dtype=float), axis=1)


def anisotropy_indicator(space: P1Space, phi, centre=(0.0, 0.0)) -> float:
    """Ratio of the largest to the smallest interface radius; 1 for a circle."""
    r = interface_radii(space, np.asarray(phi, dtype=float), centre)
    if r.size == 0:
        raise ValueError("phi has no zero level set on this mesh")
    return float(r.max() / r.min())
