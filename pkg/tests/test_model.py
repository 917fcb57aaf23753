import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import quad

from tumourfem.model import (
    R0_FLOOR,
    AssumptionError,
    GrowthConstants,
    ModelParams,
    check_assumptions,
    compute_dt_star,
    compute_growth_constants,
    continuous_dependence_dt_bound,
    gamma_phi,
    gamma_phi_partials,
    gamma_sigma,
    gamma_sigma_partials,
    mobility_m,
    psi,
    psi1_prime,
    psi1_second,
    psi2_prime,
)

P1D = ModelParams.preset("1d")
SCAN = np.linspace(-8.0, 8.0, 4001)


def truncated_cubic(r, T=2.0):
    return r**3 if abs(r) <= T else math.copysign(T**3, r) + 3 * T**2 * (r - math.copysign(T, r))


def test_presets_carry_published_values():
    p = ModelParams.preset("1d")
    assert (p.beta, p.epsilon, p.chi_phi, p.eta, p.lambda_p, p.lambda_a, p.lambda_c, p.K, p.M, p.m0) == \
        pytest.approx((0.1, 0.02, 1, 0.02, 0, 5, 2, 1, 0, 1))
    q = ModelParams.preset("2d")
    assert (q.epsilon, q.beta, q.chi_phi, q.eta, q.lambda_p, q.lambda_a, q.lambda_c, q.K, q.M, q.m0) == \
        pytest.approx((0.01, 0.1, 5, 0.04, 0.5, 0, 1, 1000, 1, 5e-6))
    r = ModelParams.preset("3d")
    assert (r.epsilon, r.chi_phi, r.eta, r.lambda_p, r.lambda_c, r.K) == pytest.approx((0.02, 15, 0.02, 0.5, 2, 1000))
    assert ModelParams.preset("3d", chi_phi=30.0).chi_sigma == pytest.approx(1500.0)
    assert p.A == pytest.approx(5.0) and p.B == pytest.approx(0.002)


def test_parameter_validation():
    with pytest.raises(ValueError):
        ModelParams(epsilon=0.0)
    with pytest.raises(ValueError):
        ModelParams(lambda_a=-1.0)
    with pytest.raises(ValueError):
        ModelParams(nutrient_mode="other")
    with pytest.raises(ValueError):
        ModelParams.preset("4d")


def test_potential_derivatives_hand_values():
    assert psi1_prime(1.0, P1D) == pytest.approx(1.0)
    assert psi2_prime(1.0) == pytest.approx(-1.0)
    assert psi1_prime(0.0, P1D) == 0.0
    assert psi1_prime(3.0, P1D) == pytest.approx(20.0)
    assert psi1_prime(-3.0, P1D) == pytest.approx(-20.0)
    assert psi1_second(3.0, P1D) == pytest.approx(12.0)


def test_potential_values():
    assert psi(0.0, P1D) == 0.0
    assert psi(1.0, P1D) == pytest.approx(-0.25)
    assert psi(1.0, P1D, shift=True) == pytest.approx(0.0)
    assert psi(-SCAN, P1D) == pytest.approx(psi(SCAN, P1D))
    for r in (0.5, 2.0, 3.7, -5.0):
        convex = quad(truncated_cubic, 0.0, r, points=[-2.0, 2.0] if abs(r) > 2 else None)[0]
        assert psi(r, P1D) == pytest.approx(convex - 0.5 * r * r, rel=1e-12)


def test_potential_derivatives_are_monotone():
    assert np.all(np.diff(psi1_prime(SCAN, P1D)) >= 0)
    assert np.all(np.diff(psi2_prime(SCAN)) <= 0)
    assert psi1_prime(SCAN, P1D) == pytest.approx([truncated_cubic(r) for r in SCAN], rel=1e-14)


def test_convex_concave_splitting_inequality():
    x = np.linspace(-5.0, 5.0, 301)
    X, Y = np.meshgrid(x, x)
    lhs = (psi1_prime(X, P1D) + psi2_prime(Y)) * (X - Y)
    rhs = psi(X, P1D) - psi(Y, P1D)
    assert np.all(lhs - rhs >= -1e-12)


def test_sources_hand_values():
    p2 = ModelParams.preset("2d")
    assert gamma_phi(1.0, 1.0, p2) == pytest.approx(0.5)
    assert np.all(gamma_phi(-1.0, SCAN, P1D) == 0.0)
    assert gamma_sigma(1.0, 1.0, ModelParams.preset("3d")) == pytest.approx(2.0)


def test_source_partials_match_differences():
    rng = np.random.default_rng(0)
    p = ModelParams(lambda_p=0.7, lambda_a=1.3, lambda_c=2.1)
    r, s = rng.uniform(-1.9, 1.9, 50), rng.uniform(-1.9, 1.9, 50)
    h = 1e-6
    for f, df in ((gamma_phi, gamma_phi_partials), (gamma_sigma, gamma_sigma_partials)):
        dr, ds = df(r, s, p)
        assert dr == pytest.approx((f(r + h, s, p) - f(r - h, s, p)) / (2 * h), abs=1e-8)
        assert ds == pytest.approx((f(r, s + h, p) - f(r, s - h, p)) / (2 * h), abs=1e-8)
    dr, ds = gamma_sigma_partials(np.array([3.0]), np.array([-3.0]), p)
    assert dr[0] == 0.0 and ds[0] == 0.0


def test_mobility():
    p2 = ModelParams.preset("2d")
    assert mobility_m(-1.0, p2) == pytest.approx(5e-6)
    assert mobility_m(1.0, p2) == pytest.approx(2.000005)
    assert mobility_m(0.0, P1D) == pytest.approx(1.0)
    m = mobility_m(SCAN, p2)
    assert m.min() >= p2.m0 and m.max() <= p2.m0 + 0.5 * p2.M * (1 + p2.trunc) ** 2 + 1e-12
    with pytest.raises(AssumptionError, match="A3"):
        mobility_m(0.0, P1D.replace(m0=0.0))


def test_growth_constants():
    c = compute_growth_constants(P1D)
    assert c.L_psi1_prime == pytest.approx(12.0)
    assert c.R1 == pytest.approx(2.75)
    assert c.R3 == pytest.approx(12.0)
    t = np.linspace(-40, 40, 400001)
    assert np.all(psi(t, P1D) - c.R1 * t**2 + c.R2 >= -1e-9)
    zero = ModelParams(lambda_p=0.0, lambda_a=0.0, lambda_c=0.0)
    assert compute_growth_constants(zero).R0 == R0_FLOOR


def test_sources_obey_linear_growth_bound():
    p = ModelParams.preset("2d")
    c = compute_growth_constants(p)
    r, s = np.meshgrid(np.linspace(-6, 6, 241), np.linspace(-6, 6, 241))
    bound = c.R0 * (1 + np.abs(r) + np.abs(s))
    assert np.all(np.abs(gamma_phi(r, s, p)) <= bound + 1e-12)
    assert np.all(np.abs(gamma_sigma(r, s, p)) <= bound + 1e-12)


def test_sources_obey_lipschitz_bounds():
    for p in (P1D, ModelParams.preset("2d"), ModelParams.preset("3d")):
        c = compute_growth_constants(p)
        rng = np.random.default_rng(2)
        a, b = rng.uniform(-5, 5, (2, 2000)), rng.uniform(-5, 5, (2, 2000))
        dist = np.abs(a[0] - b[0]) + np.abs(a[1] - b[1])
        assert np.all(np.abs(gamma_phi(*a, p) - gamma_phi(*b, p)) <= c.L_gamma_phi * dist + 1e-12)
        assert np.all(np.abs(gamma_sigma(*a, p) - gamma_sigma(*b, p)) <= c.L_gamma_sigma * dist + 1e-12)


def test_assumption_report():
    rep = check_assumptions(P1D.replace(chi_phi=0.0))
    assert rep["A4_3"].ok and rep["A4_3"].margin == math.inf
    r1 = compute_growth_constants(P1D).R1
    rep = check_assumptions(P1D.replace(chi_sigma=1.0))
    assert rep["A4_3"].ok == (5.0 > 4.0 / r1)
    bad = check_assumptions(P1D.replace(m0=0.0))
    assert not bad["A3"].ok and not bad.ok
    assert "A3" in bad.to_text()
    violated = check_assumptions(P1D.replace(chi_sigma=0.1, chi_phi=2.0))
    assert not violated["A4_3"].ok
    assert "A=5" in violated["A4_3"].detail and "chi_phi^2" in violated["A4_3"].detail


TOY = ModelParams(beta=1.0, epsilon=1.0, chi_phi=0.0, chi_sigma=1.0, K=0.0, m0=1.0,
                  nutrient_mode="generic", nutrient_mobility_value=1.0)
TOY_CONSTS = GrowthConstants(R0=1.0, R1=1.0, R2=0.0, R3=1.0)


def test_dt_star_toy_case():
    star = compute_dt_star(TOY, TOY_CONSTS)
    assert star.c["c4"] == 4.5 and star.c["c5"] == 2.0 and star.c["c7"] == 7.0
    assert star.candidates == (0.25, 1 / 18, 1 / 7)
    assert star.dt_star == 1 / 18 and star.argmin == 1


def test_dt_star_without_sources():
    p = TOY.replace(chi_sigma=3.0, lambda_a=0.0, lambda_c=0.0)
    c = compute_growth_constants(p)
    assert c.R0 == R0_FLOOR
    assert compute_dt_star(p, c).c["c4"] == 1.5 * 9.0 + 3.0 * R0_FLOOR**2


def test_dt_star_refuses_violated_assumptions():
    with pytest.raises(AssumptionError, match="A4_3"):
        compute_dt_star(P1D.replace(chi_sigma=0.1, chi_phi=2.0))
    with pytest.raises(AssumptionError, match="A3"):
        compute_dt_star(P1D.replace(m0=0.0))


def test_published_1d_bound():
    star = compute_dt_star(P1D)
    assert star.dt_star == pytest.approx(9.4736e-4, rel=1e-4)
    assert (1 / 32) ** 2 > star.dt_star > (1 / 64) ** 2


def test_continuous_dependence_bound():
    p = P1D.replace(epsilon=0.1, nutrient_mode="generic")
    c = compute_growth_constants(p)
    expected = p.B / (2 * p.A**2 * 144 + 4 * p.chi_phi**2 + 3 * p.B * (c.L_gamma_phi + c.L_gamma_sigma))
    assert continuous_dependence_dt_bound(p) == pytest.approx(expected)


_sweep = st.tuples(
    st.floats(0.05, 2.0), st.floats(0.01, 0.5), st.floats(0.0, 3.0), st.floats(5.0, 100.0),
    st.floats(0.0, 10.0), st.floats(0.0, 5.0), st.floats(0.0, 5.0), st.floats(0.1, 2.0),
)


@settings(max_examples=100, deadline=None)
@given(_sweep, st.floats(1.01, 3.0))
def test_dt_star_monotone(values, factor):
    beta, eps, chi_p, chi_s, K, lp, lc, ctr = values
    p = ModelParams(beta=beta, epsilon=eps, chi_phi=chi_p, chi_sigma=chi_s, K=K, lambda_p=lp, lambda_c=lc,
                    trace_constant=ctr)
    c = compute_growth_constants(p)
    try:
        base = compute_dt_star(p, c).dt_star
    except AssumptionError:
        return
    for field in ("R0", "R3", "C_tr"):
        bigger = dataclasses.replace(c, **{field: getattr(c, field) * factor})
        assert compute_dt_star(p, bigger).dt_star <= base * (1 + 1e-14)
    q = p.replace(chi_phi=chi_p * factor + 0.01)
    try:
        assert compute_dt_star(q, compute_growth_constants(q)).dt_star <= base * (1 + 1e-14)
    except AssumptionError:
        pass
