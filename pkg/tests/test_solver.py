import dataclasses
import warnings

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from oracles import central_difference_jacobian, componentwise_relative_error, dense_residual, smooth_random_field
from tumourfem.fem import P1Space
from tumourfem.mesh import Marker, SimplicialMesh, build_interval_mesh, build_rect_mesh
from tumourfem.model import ModelParams
from tumourfem.solver import (
    AdaptPolicy,
    NewtonConvergenceError,
    NewtonSettings,
    StabilityWarning,
    StateTriple,
    adapt_mesh,
    assemble_jacobian,
    assemble_residual,
    build_boundary_data,
    build_initial_state,
    newton_step_solve,
    run,
    step,
    transfer_state,
)

P1D = ModelParams.preset("1d")
PURE_CH = ModelParams(chi_phi=0.0, lambda_p=0.0, lambda_a=0.0, lambda_c=0.0, K=0.0)


def tanh_slab(eps):
    return lambda p: -np.tanh((np.abs(p[:, 0] - 0.5) - 0.2) / (np.sqrt(2) * eps))


def random_state(space, rng, lo=-0.9, hi=0.9):
    return StateTriple(space, rng.uniform(lo, hi, space.n), rng.uniform(-2, 2, space.n),
                       rng.uniform(0.1, 0.9, space.n))


def nonuniform_interval(nodes):
    n = len(nodes)
    cells = np.column_stack([np.arange(n - 1), np.arange(1, n)])
    return SimplicialMesh(np.asarray(nodes, float)[:, None], cells, np.array([[0], [n - 1]]),
                          np.array([Marker.ROBIN, Marker.ROBIN]))


def test_initial_state_constant_data():
    V = P1Space(build_interval_mesh(0.0, 1.0, 8))
    s = build_initial_state(-1.0, 1.0, V, P1D)
    assert s.phi == pytest.approx(-np.ones(V.n))
    assert s.sigma == pytest.approx(np.ones(V.n))
    assert s.mu == pytest.approx(np.full(V.n, -P1D.chi_phi), abs=1e-13)


def test_initial_state_profiles():
    V = P1Space(build_rect_mesh((0, 0, 1, 1), 4, 4))
    lin = lambda p: 0.2 + 0.5 * p[:, 0] - 0.1 * p[:, 1]
    assert build_initial_state(0.0, lin, V, P1D).sigma == pytest.approx(lin(V.mesh.vertices), abs=1e-13)
    W = P1Space(build_interval_mesh(0.0, 1.0, 32))
    f = tanh_slab(P1D.epsilon)
    assert build_initial_state(f, 1.0, W, P1D).phi == pytest.approx(f(W.mesh.vertices))


def test_boundary_data():
    V = P1Space(build_rect_mesh((0, 0, 1, 1), 3, 3))
    assert build_boundary_data(1.0, 0.0, 0.1, V).values == pytest.approx(np.ones(V.n))
    avg = build_boundary_data(lambda t, x: np.full(len(x), t), 0.0, 1.0, V)
    assert avg.values == pytest.approx(np.full(V.n, 0.5))
    lin = build_boundary_data(lambda t, x: 1 + x[:, 0] - 2 * x[:, 1], 0.3, 0.4, V)
    xy = V.mesh.vertices
    assert lin.values == pytest.approx(1 + xy[:, 0] - 2 * xy[:, 1], abs=1e-13)
    with pytest.raises(ValueError):
        build_boundary_data(1.0, 0.2, 0.1, V)


def test_equilibrium_has_zero_residual():
    for mesh in (build_interval_mesh(0.0, 1.0, 16), build_rect_mesh((0, 0, 2, 1), 4, 2)):
        V = P1Space(mesh)
        for p in (P1D, ModelParams.preset("2d")):
            eq = StateTriple(V, -np.ones(V.n), np.full(V.n, -p.chi_phi), np.ones(V.n))
            r = assemble_residual(eq, eq, 1e-3, p, build_boundary_data(1.0, 0, 1e-3, V))
            assert r.shape == (3 * V.n,)
            assert np.abs(r).max() <= 1e-14 * max(1.0, p.K)


@pytest.mark.parametrize("params", [
    P1D,
    P1D.replace(M=2.0, lambda_p=0.7, nutrient_mode="generic", nutrient_mobility_value=0.3),
    ModelParams.preset("2d"),
])
def test_residual_matches_dense_oracle(params):
    rng = np.random.default_rng(11)
    nodes = np.array([0.0, 0.37, 1.0])
    V = P1Space(nonuniform_interval(nodes))
    p = dataclasses.asdict(params)
    for _ in range(20):
        new, old = random_state(V, rng, -3, 3), random_state(V, rng, -3, 3)
        s_inf = rng.uniform(0, 2, V.n)
        bc = build_boundary_data(0.0, 0.0, 0.1, V)
        bc = dataclasses.replace(bc, values=s_inf)
        got = assemble_residual(new, old, 0.01, params, bc)
        want = dense_residual(nodes, [0, 2], (new.phi, new.mu, new.sigma), (old.phi, old.mu, old.sigma),
                              0.01, p, s_inf)
        assert np.abs(got - want).max() <= 1e-12


def test_nutrient_assembly_variants_agree():
    V = P1Space(build_rect_mesh((0, 0, 1, 1), 3, 3))
    rng = np.random.default_rng(5)
    a = P1D
    b = P1D.replace(nutrient_mode="generic", nutrient_mobility_value=1.0 / P1D.chi_sigma)
    bc = build_boundary_data(1.0, 0, 1e-3, V)
    for _ in range(5):
        new, old = random_state(V, rng), random_state(V, rng)
        ra = assemble_residual(new, old, 1e-3, a, bc)
        rb = assemble_residual(new, old, 1e-3, b, bc)
        assert np.abs(ra - rb).max() <= 1e-13 * max(1.0, np.abs(ra).max())


@pytest.mark.parametrize("mesh", [build_interval_mesh(0.0, 1.0, 4), build_rect_mesh((0, 0, 1, 1), 2, 2)])
@pytest.mark.parametrize("params", [P1D, ModelParams.preset("2d"),
                                    P1D.replace(M=1.5, lambda_p=1.0, nutrient_mode="generic")])
def test_jacobian_matches_central_differences(mesh, params):
    V = P1Space(mesh)
    rng = np.random.default_rng(2)
    old = random_state(V, rng)
    new = random_state(V, rng)
    bc = build_boundary_data(1.0, 0, 1e-2, V)
    J = assemble_jacobian(new, old, 1e-2, params, bc).toarray()
    D = central_difference_jacobian(lambda x: assemble_residual(new.with_values(x), old, 1e-2, params, bc),
                                    new.stacked(), 1e-4)
    assert componentwise_relative_error(J, D) <= 1e-6


def test_jacobian_pattern_is_symmetric():
    V = P1Space(build_rect_mesh((0, 0, 1, 1), 3, 3))
    rng = np.random.default_rng(0)
    s = random_state(V, rng)
    J = assemble_jacobian(s, s, 1e-3, P1D).tocsr()
    stored = sp.csr_matrix((np.ones(J.nnz), J.indices, J.indptr), shape=J.shape)
    assert abs(stored - stored.T).nnz == 0
    # every value nonzero lies on the stored pattern
    assert abs(abs(J).sign() - abs(J).sign().multiply(stored)).nnz == 0


def test_linear_problem_converges_in_one_iteration():
    p = PURE_CH.replace(convex_potential=False)
    V = P1Space(build_interval_mesh(0.0, 1.0, 16))
    rng = np.random.default_rng(9)
    old = random_state(V, rng)
    bc = build_boundary_data(1.0, 0, 1e-3, V)
    new, rep = newton_step_solve(old, old, 1e-3, p, bc)
    assert rep.iterations == 1
    assert rep.residual <= NewtonSettings().abs_tol


def test_root_needs_no_iterations():
    V = P1Space(build_interval_mesh(0.0, 1.0, 16))
    eq = StateTriple(V, -np.ones(V.n), np.full(V.n, -P1D.chi_phi), np.ones(V.n))
    new, rep = step(eq, 1e-4, P1D, build_boundary_data(1.0, 0, 1e-4, V))
    assert rep.iterations == 0
    assert new.phi == pytest.approx(eq.phi) and new.sigma == pytest.approx(eq.sigma)


def test_newton_converges_quadratically():
    V = P1Space(build_interval_mesh(0.0, 1.0, 64))
    s = build_initial_state(tanh_slab(P1D.epsilon), 1.0, V, P1D)
    tight = NewtonSettings(abs_tol=1e-13, rel_tol=1e-16)
    _, rep = newton_step_solve(s, s, 1e-2, P1D, build_boundary_data(1.0, 0, 1e-2, V), tight)
    e = [h for h in rep.history if h > 1e-12]
    assert len(e) >= 4
    c = [e[k + 1] / e[k] ** 2 for k in range(len(e) - 3, len(e) - 1)]
    assert max(c) <= 1.0


def test_newton_failure_names_the_step():
    V = P1Space(build_interval_mesh(0.0, 1.0, 32))
    s = build_initial_state(tanh_slab(P1D.epsilon), 1.0, V, P1D)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", StabilityWarning)
        with pytest.raises(NewtonConvergenceError, match="step 1"):
            run(s, 0.01, 1e-3, P1D, settings=NewtonSettings(max_iter=1, abs_tol=1e-16, rel_tol=1e-16))


def test_mass_is_conserved_without_proliferation():
    p = P1D.replace(lambda_a=0.0, lambda_p=0.0)
    V = P1Space(build_interval_mesh(0.0, 1.0, 32))
    s = build_initial_state(tanh_slab(p.epsilon), 1.0, V, p)
    traj = run(s, 50 * 1e-3, 1e-3, p, keep="all")
    m0 = V.lumped_inner(s.phi, np.ones(V.n))
    for n, st_ in enumerate(traj.states):
        assert abs(V.lumped_inner(st_.phi, np.ones(V.n)) - m0) <= 10 * NewtonSettings().abs_tol * max(n, 1)


@settings(max_examples=8, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([1e-3, 1e-1, 10.0]))
def test_pure_cahn_hilliard_energy_never_increases(seed, dt):
    from tumourfem.diagnostics import discrete_energy
    V = P1Space(build_interval_mesh(0.0, 1.0, 32))
    rng = np.random.default_rng(seed)
    phi0 = smooth_random_field(V.mesh.vertices[:, 0], rng)
    s = build_initial_state(lambda x: phi0, 0.5, V, PURE_CH)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", StabilityWarning)
        traj = run(s, 5 * dt, dt, PURE_CH, keep="all")
    e = [discrete_energy(V, q.phi, q.sigma, PURE_CH) for q in traj.states]
    assert np.all(np.diff(e) <= 1e-10)


def test_run_counts_states_and_times():
    V = P1Space(build_interval_mesh(0.0, 1.0, 16))
    s = build_initial_state(tanh_slab(P1D.epsilon), 1.0, V, P1D)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", StabilityWarning)
        traj = run(s, 10 * 1e-3, 1e-3, P1D)
        assert len(traj.states) == 11 and len(traj.ledger) == 10
        assert traj.times[-1] == pytest.approx(0.01)
        short = run(s, 0.0105, 1e-3, P1D, final_step="shorten")
        assert short.final.time == pytest.approx(0.0105) and len(short.reports) == 11
        uni = run(s, 0.0105, 1e-3, P1D, final_step="uniform")
        assert uni.final.time == pytest.approx(0.011)


def test_equilibrium_run_stays_put():
    V = P1Space(build_interval_mesh(0.0, 1.0, 16))
    eq = StateTriple(V, -np.ones(V.n), np.full(V.n, -P1D.chi_phi), np.ones(V.n))
    traj = run(eq, 0.005, 5e-4, P1D, keep="snapshots", snapshot_every=2)
    for s in traj.states:
        assert s.phi == pytest.approx(eq.phi, abs=1e-12)
        assert s.sigma == pytest.approx(eq.sigma, abs=1e-12)


def test_runs_are_bitwise_deterministic():
    V = P1Space(build_rect_mesh((0, 0, 1, 1), 6, 6))
    p = ModelParams.preset("2d").replace(epsilon=0.1)
    f = lambda x: -np.tanh((np.hypot(x[:, 0], x[:, 1]) - 0.5) / 0.1)
    a = run(build_initial_state(f, 1.0, V, p), 5e-3, 1e-3, p, keep="all")
    b = run(build_initial_state(f, 1.0, P1Space(V.mesh), p), 5e-3, 1e-3, p, keep="all")
    for x, y in zip(a.states, b.states):
        assert np.array_equal(x.stacked(), y.stacked())


def test_published_1d_setting_needs_few_newton_iterations():
    h = 1 / 32
    V = P1Space(build_interval_mesh(0.0, 1.0, 32))
    s = build_initial_state(tanh_slab(P1D.epsilon), 1.0, V, P1D)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", StabilityWarning)
        traj = run(s, 0.1, h * h, P1D, keep="none")
    assert max(r.iterations for r in traj.reports) <= 10
    assert traj.final.time == pytest.approx(0.1)


def test_stability_warning():
    V = P1Space(build_interval_mesh(0.0, 1.0, 8))
    s = build_initial_state(-1.0, 1.0, V, P1D)
    with pytest.warns(StabilityWarning):
        run(s, 2e-3, 1e-3, P1D)


def test_adaptive_mesh_and_transfer():
    base = build_rect_mesh((0, 0, 2, 2), 4, 4, {"left": "neumann", "bottom": "neumann"})
    pol = AdaptPolicy(base, h_min=base.h_max / 8, every=2)
    f = lambda x: -np.tanh((np.hypot(x[:, 0], x[:, 1]) - 1.0) / 0.05)
    mesh = adapt_mesh(pol, f)
    assert mesh.check_conforming() and mesh.n_cells > base.n_cells
    assert mesh.h_min == pytest.approx(base.h_max / 8)
    V = P1Space(mesh)
    s = build_initial_state(f, 1.0, V, P1D)
    W = P1Space(base)
    t = transfer_state(s, W)
    idx = [np.flatnonzero(np.all(np.isclose(mesh.vertices, v), axis=1))[0] for v in base.vertices]
    assert t.phi == pytest.approx(s.phi[idx]) and t.sigma == pytest.approx(s.sigma[idx])
    p = ModelParams.preset("2d").replace(epsilon=0.05)
    traj = run(build_initial_state(f, 1.0, V, p), 4e-3, 1e-3, p, adapt=pol, keep="all")
    assert len(traj.states) == 5 and traj.final.time == pytest.approx(4e-3)
