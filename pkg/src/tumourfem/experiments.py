"""Experiment drivers: single runs from a configuration, the convergence
study against a reference solution, the data-perturbation study and the
two-dimensional fingering run.
"""

from __future__ import annotations

import logging
import math
import time as _time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .config import EocStudyConfig, RunConfig
from .diagnostics import FIELDS, NORM_KINDS, ErrorAccumulator, ErrorTable, anisotropy_indicator
from .fem import P1Space
from .mesh import (
    Marker,
    SimplicialMesh,
    build_box_mesh,
    build_interval_mesh,
    build_rect_mesh,
    evaluate_p1,
    is_nested,
)
from .model import (
    AssumptionError,
    ModelParams,
    compute_growth_constants,
    continuous_dependence_dt_bound,
    psi1_prime,
    psi2_prime,
)
from .solver import (
    AdaptPolicy,
    NewtonSettings,
    StateTriple,
    Trajectory,
    adapt_mesh,
    build_initial_state,
    run,
)

__all__ = [
    "tanh_profile",
    "perturbed_circle",
    "ellipsoid_3d",
    "octahedron_3d",
    "initial_functions",
    "build_mesh",
    "prepare_run",
    "run_config",
    "EocResult",
    "run_eoc_study",
    "PerturbationRow",
    "continuous_dependence_experiment",
    "FingeringResult",
    "fingering_experiment",
]

log = logging.getLogger(__name__)
SQRT2 = math.sqrt(2.0)
_DEFAULT_SIGMA = {"ellipsoid_3d": 0.9, "octahedron_3d": 0.9}


# -- initial profiles --------------------------------------------------------------


def tanh_profile(epsilon: float, centre: float = 0.5, radius: float = 0.2) -> Callable:
    """Tumour slab ``-tanh((|x - centre| - radius)/(sqrt(2) eps))`` on an interval."""
    def phi(x):
        return -np.tanh((np.abs(x[:, 0] - centre) - radius) / (SQRT2 * epsilon))
    return phi


def perturbed_circle(epsilon: float, radius: float = 2.0, amplitude: float = 0.1, mode: int = 2,
                     centre=(0.0, 0.0)) -> Callable:
    """Disc whose radius is modulated by ``amplitude cos(mode theta)``."""
    c = np.asarray(centre, dtype=float)

    def phi(x):
        d = x - c
        r = np.hypot(d[:, 0], d[:, 1])
        theta = np.arctan2(d[:, 1], d[:, 0])
        return -np.tanh((r - (radius + amplitude * np.cos(mode * theta))) / (SQRT2 * epsilon))
    return phi


def ellipsoid_3d(epsilon: float) -> Callable:
    """Quartic superellipsoid tumour."""
    def phi(x):
        r = (0.5 * x[:, 0] ** 4 + 1.5 * x[:, 1] ** 4 + 1.5 * x[:, 2] ** 4) ** 0.25 / 3.0
        return -np.tanh((r - 0.1) / (SQRT2 * epsilon))
    return phi


def octahedron_3d(epsilon: float) -> Callable:
    """Octahedral tumour from the l1 distance."""
    def phi(x):
        r = np.abs(x).sum(axis=1) / 3.0
        return -np.tanh((r - 0.2) / (SQRT2 * epsilon))
    return phi


def initial_functions(cfg: RunConfig):
    """Initial phase field and nutrient described by a configuration."""
    ini, eps = cfg.initial, cfg.params.epsilon
    sigma = ini.sigma if ini.sigma is not None else _DEFAULT_SIGMA.get(ini.profile, 1.0)
    if ini.profile == "tanh_1d":
        centre = ini.centre[0] if ini.centre else 0.5
        return tanh_profile(eps, centre, 0.2 if ini.radius is None else ini.radius), sigma
    if ini.profile == "perturbed_circle":
        radius = 2.0 if ini.radius is None else ini.radius
        return perturbed_circle(eps, radius, ini.amplitude, ini.mode, ini.centre or (0.0, 0.0)), sigma
    if ini.profile == "ellipsoid_3d":
        return ellipsoid_3d(eps), sigma
    if ini.profile == "octahedron_3d":
        return octahedron_3d(eps), sigma
    return ini.phi, sigma


# -- runs from a configuration ---------------------------------------------------------


def build_mesh(cfg: RunConfig) -> SimplicialMesh:
    m = cfg.mesh
    if m.dim == 1:
        a, b = m.bounds
        markers = (m.markers.get("left", Marker.ROBIN), m.markers.get("right", Marker.ROBIN))
        return build_interval_mesh(a, b, m.n, markers)
    if m.dim == 2:
        return build_rect_mesh(m.bounds, m.n, m.n, m.markers)
    return build_box_mesh(m.bounds, m.n, m.markers)


def prepare_run(cfg: RunConfig):
    """Initial state and adaptivity policy of a configured run."""
    phi0, sigma0 = initial_functions(cfg)
    mesh = build_mesh(cfg)
    policy = None
    if cfg.mesh.adapt:
        if cfg.mesh.h_min is None:
            raise ValueError("adaptive runs need mesh.h_min")
        policy = AdaptPolicy(mesh, h_min=cfg.mesh.h_min, every=cfg.mesh.adapt_every,
                             threshold=cfg.mesh.threshold)
        at = phi0 if callable(phi0) else (lambda x: np.full(len(x), float(phi0)))
        mesh = adapt_mesh(policy, at)
    space = P1Space(mesh)
    return build_initial_state(phi0, sigma0, space, cfg.params), policy


def run_config(cfg: RunConfig, callback: Optional[Callable] = None, keep: str = "snapshots") -> Trajectory:
    initial, policy = prepare_run(cfg)
    n_steps = max(1, math.ceil(cfg.time.T / cfg.dt - 1e-9))
    every = max(1, n_steps // max(cfg.output.snapshots, 1))
    return run(initial, cfg.time.T, cfg.dt, cfg.params, cfg.sigma_inf, cfg.newton, adapt=policy,
               final_step=cfg.time.final_step, keep=keep, snapshot_every=every, callback=callback)


# -- convergence study -------------------------------------------------------------------


@dataclass
class EocResult:
    table: ErrorTable
    eoc: dict
    reference_steps: int
    seconds: float


def _level_initial(source: StateTriple, space: P1Space, params: ModelParams) -> StateTriple:
    """Nodal interpolation of a fine state as initial data on ``space``."""
    pts = space.mesh.vertices
    phi = evaluate_p1(source.space.mesh, source.phi, pts)
    sigma = evaluate_p1(source.space.mesh, source.sigma, pts)
    return _with_potential(space, phi, sigma, params)


def _with_potential(space: P1Space, phi, sigma, params: ModelParams) -> StateTriple:
    """State whose chemical potential is consistent with ``phi`` and ``sigma``."""
    mu = (params.A * (psi1_prime(phi, params) + psi2_prime(phi)) - params.chi_phi * sigma
          + params.B * (space.stiffness @ phi) / space.lumped_mass)
    return StateTriple(space, phi, mu, sigma, 0.0)


def run_eoc_study(study: EocStudyConfig, params: Optional[ModelParams] = None,
                  settings: NewtonSettings = NewtonSettings(), sigma_inf: float = 1.0,
                  progress: Optional[Callable[[str], None]] = None, threads: int = 1) -> EocResult:
    """Errors of coarse solutions against a fine reference, with their orders.

    The initial data come from a preparatory run on the reference grid over
    ``[0, T_precondition]`` started from the tanh slab and a constant
    nutrient.  Every level starts from the nodal interpolation of its final
    state and runs ``ceil(T / h^2)`` uniform steps of size ``h^2``.  With
    ``threads > 1`` the coarse levels are solved concurrently.
    """
    params = params or ModelParams.preset("1d")
    say = progress or (lambda msg: log.info(msg))
    t_start = _time.perf_counter()
    n_ref = int(round(1.0 / study.h_ref))
    ref_space = P1Space(build_interval_mesh(0.0, 1.0, n_ref))
    dt_ref = study.h_ref**2

    pre = build_initial_state(tanh_profile(params.epsilon), 1.0, ref_space, params)
    pre_traj = run(pre, study.T_precondition, dt_ref, params, sigma_inf, settings,
                   final_step="shorten", keep="none")
    seed = pre_traj.final
    say(f"preconditioned on h={study.h_ref:g} to t={seed.time:g}")

    def solve_level(h):
        space = P1Space(build_interval_mesh(0.0, 1.0, int(round(1.0 / h))))
        if not is_nested(space.mesh, ref_space.mesh):
            raise ValueError(f"mesh h={h} does not nest in the reference mesh")
        traj = run(_level_initial(seed, space, params), study.T, h * h, params, sigma_inf, settings,
                   final_step="uniform", keep="all")
        say(f"level h={h:g}: {len(traj.states) - 1} steps")
        return h, traj

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            levels = list(pool.map(solve_level, study.hs))
    else:
        levels = [solve_level(h) for h in study.hs]

    accs = [ErrorAccumulator(traj.space, ref_space, traj.states, traj.dt, dt_ref, study.T)
            for _, traj in levels]

    def feed(k, old, new, report):
        for acc in accs:
            acc.add(k, new)

    ref0 = _level_initial(seed, ref_space, params)
    ref_traj = run(ref0, study.T, dt_ref, params, sigma_inf, settings, final_step="uniform",
                   keep="none", callback=feed)
    n_steps = len(ref_traj.reports)
    say(f"reference h={study.h_ref:g}: {n_steps} steps")

    names = [f"{f}_{k}" for f in FIELDS for k in NORM_KINDS]
    errors = {name: [acc.result()[name] for acc in accs] for name in names}
    table = ErrorTable([h for h, _ in levels], [t.dt for _, t in levels], errors)
    orders = table.eoc() if len(levels) >= 2 else {}
    return EocResult(table, orders, n_steps, _time.perf_counter() - t_start)


# -- continuous dependence -----------------------------------------------------------------


@dataclass
class PerturbationRow:
    delta: float
    aggregate: float
    ratio: float


def _bump(x):
    """Smooth bump vanishing with its derivative at the ends of the unit interval."""
    return np.sin(np.pi * x[:, 0]) ** 2


def _difference_aggregate(a: Trajectory, b: Trajectory, dt: float) -> float:
    """Left-hand side of the continuous dependence estimate for two runs."""
    V = a.space
    peak = incr = integ = 0.0
    for n in range(1, len(a.states)):
        sa, sb = a.states[n], b.states[n]
        pa, pb = a.states[n - 1], b.states[n - 1]
        dphi, dsig = sa.phi - sb.phi, sa.sigma - sb.sigma
        peak = max(peak, V.norm_h(dphi) ** 2 + V.norm_h(dsig) ** 2)
        incr += V.norm_h(dphi - (pa.phi - pb.phi)) ** 2 + V.norm_h(dsig - (pa.sigma - pb.sigma)) ** 2
        integ += dt * (V.norm_h(sa.mu - sb.mu) ** 2 + V.seminorm_h1(dsig) ** 2
                       + V.norm_boundary_h(dsig, Marker.ROBIN) ** 2)
    return peak + incr + integ


def continuous_dependence_experiment(cfg: RunConfig, deltas: Sequence[float], target: str = "initial",
                                     T: Optional[float] = None, dt: Optional[float] = None) -> list:
    """Paired runs with perturbed data and the resulting difference aggregate.

    The first run starts from the configured data; the second adds
    ``delta`` times a smooth bump to the initial phase field
    (``target="initial"``) or ``delta`` to the far-field nutrient
    (``target="boundary"``).  Mobilities must be constant one and the step
    must satisfy the continuous dependence bound.

    Returns
    -------
    list of PerturbationRow
        ``ratio`` is ``aggregate / delta**2``.
    """
    params = cfg.params
    n_const = params.n_bounds[0]
    if params.M != 0 or params.m0 != 1 or n_const != 1:
        raise AssumptionError("continuous dependence needs constant unit mobilities: set M = 0, m0 = 1 "
                              "and a unit nutrient mobility")
    bound = continuous_dependence_dt_bound(params, compute_growth_constants(params))
    dt = cfg.dt if dt is None else dt
    if not dt < bound:
        raise AssumptionError(f"time step {dt:g} violates the continuous dependence bound "
                              f"dt < {bound:g}")
    T = cfg.perturb.T if T is None else T
    if target not in ("initial", "boundary"):
        raise ValueError("target must be 'initial' or 'boundary'")
    initial, _ = prepare_run(replace(cfg, mesh=replace(cfg.mesh, adapt=False)))
    space = initial.space
    base = run(initial, T, dt, params, cfg.sigma_inf, cfg.newton, final_step="uniform", keep="all")
    rows = []
    bump = _bump(space.mesh.vertices) if space.dim == 1 else np.exp(-np.sum(space.mesh.vertices**2, axis=1))
    for delta in deltas:
        if target == "initial":
            pert = _with_potential(space, initial.phi + delta * bump, initial.sigma, params)
            other = run(pert, T, dt, params, cfg.sigma_inf, cfg.newton, final_step="uniform", keep="all")
        else:
            other = run(initial, T, dt, params, cfg.sigma_inf + delta, cfg.newton, final_step="uniform",
                        keep="all")
        agg = _difference_aggregate(base, other, dt)
        rows.append(PerturbationRow(float(delta), agg, agg / delta**2 if delta else math.nan))
    return rows


# -- fingering -------------------------------------------------------------------------------


@dataclass
class FingeringResult:
    times: list
    anisotropy: list
    vertices: list
    seconds: float
    trajectory: Trajectory


def fingering_experiment(cfg: RunConfig, sample_every: int = 50, callback: Optional[Callable] = None) -> FingeringResult:
    """Perturbed-circle run tracking the max/min ratio of the interface radius."""
    initial, policy = prepare_run(cfg)
    centre = cfg.initial.centre or (0.0, 0.0)
    times = [initial.time]
    aniso = [anisotropy_indicator(initial.space, initial.phi, centre)]
    verts = [initial.space.n]
    t0 = _time.perf_counter()

    def track(k, old, new, report):
        if k % sample_every == 0:
            times.append(new.time)
            aniso.append(anisotropy_indicator(new.space, new.phi, centre))
            verts.append(new.space.n)
        if callback is not None:
            callback(k, old, new, report)

    n_steps = max(1, math.ceil(cfg.time.T / cfg.dt - 1e-9))
    traj = run(initial, cfg.time.T, cfg.dt, cfg.params, cfg.sigma_inf, cfg.newton, adapt=policy,
               final_step=cfg.time.final_step, keep="snapshots",
               snapshot_every=max(1, n_steps // max(cfg.output.snapshots, 1)), callback=track)
    if times[-1] != traj.final.time:
        times.append(traj.final.time)
        aniso.append(anisotropy_indicator(traj.final.space, traj.final.phi, centre))
        verts.append(traj.final.space.n)
    return FingeringResult(times, aniso, verts, _time.perf_counter() - t0, traj)
