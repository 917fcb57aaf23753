"""Model parameters, truncated constitutive functions and stability constants.

All model functions are vectorised over numpy arrays.  Outside the
truncation range ``[-trunc, trunc]`` the source terms and the mobility are
evaluated at the clamped argument, while the convex potential derivative is
continued linearly with its boundary slope so that it stays monotone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

__all__ = [
    "NUTRIENT_MODES",
    "ModelParams",
    "GrowthConstants",
    "AssumptionCheck",
    "AssumptionReport",
    "DtStar",
    "AssumptionError",
    "psi1_prime",
    "psi1_second",
    "psi2_prime",
    "psi",
    "gamma_phi",
    "gamma_sigma",
    "gamma_phi_partials",
    "gamma_sigma_partials",
    "mobility_m",
    "nutrient_mobility",
    "compute_growth_constants",
    "check_assumptions",
    "compute_dt_star",
    "continuous_dependence_dt_bound",
]

NUTRIENT_MODES = ("generic", "constant_inverse")
R0_FLOOR = 1e-12


class AssumptionError(ValueError):
    """A modelling assumption needed by an operation does not hold."""


@dataclass(frozen=True)
class ModelParams:
    """Scalar parameters of the tumour model.

    Parameters
    ----------
    beta, epsilon : float
        Surface tension and interface width; ``A = beta/epsilon`` and
        ``B = beta*epsilon``.
    chi_phi, chi_sigma : float
        Chemotaxis coefficient and nutrient diffusivity.
    K : float
        Boundary permeability of the Robin condition.
    lambda_p, lambda_a, lambda_c : float
        Proliferation, apoptosis and consumption rates.
    M, m0 : float
        Shape and floor of the mobility ``m(r) = M/2 (1+r)^2 + m0``.
    trunc : float
        Truncation bound of the model functions.
    nutrient_mode : {"constant_inverse", "generic"}
        ``constant_inverse`` fixes the nutrient mobility to ``1/chi_sigma`` so the
        nutrient flux becomes ``grad(sigma) - eta grad(phi)``.  ``generic`` uses
        the constant ``nutrient_mobility_value``.
    nutrient_mobility_value : float
        Nutrient mobility in generic mode.
    trace_constant : float
        Trace inequality constant, only used by the reported time-step bound.
    convex_potential : bool
        Keep the quartic convex part of the potential.  Switching it off leaves
        only the concave quadratic, which makes the discrete system linear when
        all rates vanish; meant for testing.
    """

    beta: float = 0.1
    epsilon: float = 0.02
    chi_phi: float = 1.0
    chi_sigma: float = 50.0
    K: float = 1.0
    lambda_p: float = 0.0
    lambda_a: float = 5.0
    lambda_c: float = 2.0
    M: float = 0.0
    m0: float = 1.0
    trunc: float = 2.0
    nutrient_mode: str = "constant_inverse"
    nutrient_mobility_value: float = 1.0
    trace_constant: float = 1.0
    convex_potential: bool = True

    def __post_init__(self):
        positive = {"beta": self.beta, "epsilon": self.epsilon, "chi_sigma": self.chi_sigma,
                    "trunc": self.trunc, "trace_constant": self.trace_constant}
        for name, value in positive.items():
            if not (value > 0 and math.isfinite(value)):
                raise ValueError(f"{name} must be positive and finite, got {value}")
        nonneg = {"chi_phi": self.chi_phi, "K": self.K, "lambda_p": self.lambda_p,
                  "lambda_a": self.lambda_a, "lambda_c": self.lambda_c, "M": self.M}
        for name, value in nonneg.items():
            if not (value >= 0 and math.isfinite(value)):
                raise ValueError(f"{name} must be nonnegative and finite, got {value}")
        if not math.isfinite(self.m0):
            raise ValueError("m0 must be finite")
        if self.nutrient_mode not in NUTRIENT_MODES:
            raise ValueError(f"nutrient_mode must be one of {NUTRIENT_MODES}, got {self.nutrient_mode!r}")
        if self.nutrient_mode == "generic" and not self.nutrient_mobility_value > 0:
            raise ValueError("generic nutrient mobility must be positive")

    @property
    def A(self) -> float:
        return self.beta / self.epsilon

    @property
    def B(self) -> float:
        return self.beta * self.epsilon

    @property
    def eta(self) -> float:
        """Active transport coefficient ``chi_phi / chi_sigma``."""
        return self.chi_phi / self.chi_sigma

    @property
    def n_bounds(self) -> tuple:
        """Lower and upper bound of the (constant) nutrient mobility."""
        if self.nutrient_mode == "constant_inverse":
            n = 1.0 / self.chi_sigma
        else:
            n = self.nutrient_mobility_value
        return n, n

    def replace(self, **changes) -> "ModelParams":
        return replace(self, **changes)

    @classmethod
    def from_eta(cls, eta: float, **kwargs) -> "ModelParams":
        """Build parameters with ``chi_sigma = chi_phi / eta``."""
        chi_phi = kwargs.get("chi_phi", cls.chi_phi)
        if not (eta > 0 and chi_phi > 0):
            raise ValueError("eta and chi_phi must be positive to derive chi_sigma")
        return cls(chi_sigma=chi_phi / eta, **kwargs)

    @classmethod
    def preset(cls, name: str, **overrides) -> "ModelParams":
        """Published parameter sets: ``"1d"``, ``"2d"`` or ``"3d"``."""
        sets = {
            "1d": dict(beta=0.1, epsilon=0.02, chi_phi=1.0, lambda_p=0.0, lambda_a=5.0,
                       lambda_c=2.0, K=1.0, M=0.0, m0=1.0),
            "2d": dict(beta=0.1, epsilon=0.01, chi_phi=5.0, lambda_p=0.5, lambda_a=0.0,
                       lambda_c=1.0, K=1000.0, M=1.0, m0=5e-6),
            "3d": dict(beta=0.1, epsilon=0.02, chi_phi=15.0, lambda_p=0.5, lambda_a=0.0,
                       lambda_c=2.0, K=1000.0, M=1.0, m0=5e-6),
        }
        etas = {"1d": 0.02, "2d": 0.04, "3d": 0.02}
        try:
            values = dict(sets[name])
        except KeyError:
            raise ValueError(f"unknown preset {name!r}; choose from {sorted(sets)}") from None
        eta = overrides.pop("eta", etas[name])
        values.update(overrides)
        if "chi_sigma" in values:
            return cls(**values)
        if values["chi_phi"] == 0:
            # no chemotaxis: eta cannot fix chi_sigma, keep the published diffusivity
            values["chi_sigma"] = sets[name]["chi_phi"] / etas[name]
            return cls(**values)
        return cls.from_eta(eta, **values)


# -- potential -----------------------------------------------------------------


def psi1_prime(r, params: ModelParams):
    """Convex part ``r^3``, continued linearly with slope ``3 trunc^2`` outside the core."""
    r = np.asarray(r, dtype=float)
    if not params.convex_potential:
        return np.zeros_like(r)
    T = params.trunc
    c = np.clip(r, -T, T)
    return c**3 + 3.0 * T**2 * (r - c)


def psi1_second(r, params: ModelParams):
    r = np.asarray(r, dtype=float)
    if not params.convex_potential:
        return np.zeros_like(r)
    T = params.trunc
    return 3.0 * np.clip(r, -T, T) ** 2


def psi2_prime(r, params: Optional[ModelParams] = None):
    """Concave part ``-r``."""
    return -np.asarray(r, dtype=float)


def psi(r, params: ModelParams, shift: bool = False):
    """Truncated double well pinned at ``psi(0) = 0``.

    With ``shift=True`` the constant ``1/4`` is added so that the untruncated
    well has minimum value zero.
    """
    r = np.asarray(r, dtype=float)
    T = params.trunc
    if params.convex_potential:
        c = np.clip(r, -T, T)
        d = r - c
        # integral of the slope-continued cubic
        convex = np.where(np.abs(r) > T, 0.25 * T**4 + T**3 * np.abs(d) + 1.5 * T**2 * d**2, 0.25 * c**4)
    else:
        convex = np.zeros_like(r)
    out = convex - 0.5 * r**2
    return out + 0.25 if shift else out


# -- sources and mobilities ------------------------------------------------------


def gamma_phi(r, s, params: ModelParams):
    """Proliferation minus apoptosis ``(lambda_p s - lambda_a)(1+r)/2`` at clamped arguments."""
    T = params.trunc
    r = np.clip(np.asarray(r, dtype=float), -T, T)
    s = np.clip(np.asarray(s, dtype=float), -T, T)
    return 0.5 * (params.lambda_p * s - params.lambda_a) * (1.0 + r)


def gamma_sigma(r, s, params: ModelParams):
    """Nutrient consumption ``lambda_c s (1+r)/2`` at clamped arguments."""
    T = params.trunc
    r = np.clip(np.asarray(r, dtype=float), -T, T)
    s = np.clip(np.asarray(s, dtype=float), -T, T)
    return 0.5 * params.lambda_c * s * (1.0 + r)


def _inside(x, T):
    return (np.abs(np.asarray(x, dtype=float)) <= T).astype(float)


def gamma_phi_partials(r, s, params: ModelParams):
    """Partial derivatives of :func:`gamma_phi` in ``r`` and ``s`` (zero where clamped)."""
    T = params.trunc
    rc = np.clip(np.asarray(r, dtype=float), -T, T)
    sc = np.clip(np.asarray(s, dtype=float), -T, T)
    dr = 0.5 * (params.lambda_p * sc - params.lambda_a) * _inside(r, T)
    ds = 0.5 * params.lambda_p * (1.0 + rc) * _inside(s, T)
    return dr, ds


def gamma_sigma_partials(r, s, params: ModelParams):
    """Partial derivatives of :func:`gamma_sigma` in ``r`` and ``s`` (zero where clamped)."""
    T = params.trunc
    rc = np.clip(np.asarray(r, dtype=float), -T, T)
    sc = np.clip(np.asarray(s, dtype=float), -T, T)
    dr = 0.5 * params.lambda_c * sc * _inside(r, T)
    ds = 0.5 * params.lambda_c * (1.0 + rc) * _inside(s, T)
    return dr, ds


def mobility_m(r, params: ModelParams):
    """Tumour mobility ``M/2 (1+r)^2 + m0`` at the clamped argument.

    Raises
    ------
    AssumptionError
        If ``m0 <= 0``, since the mobility must be bounded away from zero.
    """
    if not params.m0 > 0:
        raise AssumptionError(f"(A3) mobility floor m0 must be positive, got {params.m0}")
    T = params.trunc
    r = np.clip(np.asarray(r, dtype=float), -T, T)
    return 0.5 * params.M * (1.0 + r) ** 2 + params.m0


def nutrient_mobility(r, params: ModelParams):
    """Constant nutrient mobility of the selected mode, broadcast to the shape of ``r``."""
    return np.full(np.shape(r), params.n_bounds[0])


# -- constants -------------------------------------------------------------------


@dataclass(frozen=True)
class GrowthConstants:
    """Growth and Lipschitz bounds of the model functions.

    ``R1`` and ``R2`` bound the potential from below by ``R1 t^2 - R2``;
    ``R0`` bounds the sources by ``R0 (1 + |phi| + |sigma|)``; ``R3`` bounds
    the potential derivatives by ``R3 (1 + |t|)``.
    """

    R0: float
    R1: float
    R2: float
    R3: float
    L_psi1_prime: float = 0.0
    L_psi2_prime: float = 1.0
    L_gamma_phi: float = 0.0
    L_gamma_sigma: float = 0.0
    C_tr: float = 1.0


def _coercivity(params: ModelParams, n_grid: int = 200001):
    T = params.trunc
    t = np.linspace(-10.0 * T, 10.0 * T, n_grid)
    # asymptotic ratio psi(t)/t^2 of the truncated well
    slope = 1.5 * T**2 - 0.5 if params.convex_potential else -0.5
    R1 = 0.5 * slope if slope > 0 else 0.0
    R2 = float(np.max(R1 * t**2 - psi(t, params)))
    return R1, max(R2, 0.0)


def compute_growth_constants(params: ModelParams, trace_constant: Optional[float] = None) -> GrowthConstants:
    """Closed-form growth and Lipschitz constants of the truncated model functions.

    ``R1`` is taken as half the asymptotic quadratic coefficient of the
    truncated potential, which keeps ``R2`` finite; ``R2`` is then the
    smallest value satisfying the lower bound on a dense grid over
    ``[-10 trunc, 10 trunc]``.
    """
    T = params.trunc
    R0 = max(0.5 * params.lambda_p * (1.0 + T), 0.5 * params.lambda_a,
             0.5 * params.lambda_c * (1.0 + T), R0_FLOOR)
    R1, R2 = _coercivity(params)
    R3 = max(1.0, 3.0 * T**2) if params.convex_potential else 1.0
    L1 = 3.0 * T**2 if params.convex_potential else 0.0
    L_gphi = 0.5 * (params.lambda_p * T + params.lambda_a) + 0.5 * params.lambda_p * (1.0 + T)
    L_gsig = 0.5 * params.lambda_c * T + 0.5 * params.lambda_c * (1.0 + T)
    ctr = params.trace_constant if trace_constant is None else trace_constant
    return GrowthConstants(R0=R0, R1=R1, R2=R2, R3=R3, L_psi1_prime=L1, L_psi2_prime=1.0,
                           L_gamma_phi=L_gphi, L_gamma_sigma=L_gsig, C_tr=ctr)


@dataclass(frozen=True)
class AssumptionCheck:
    name: str
    ok: bool
    detail: str
    margin: float = math.nan


@dataclass(frozen=True)
class AssumptionReport:
    checks: tuple

    @property
    def ok(self) -> bool:
        return all(c.ok for c in self.checks)

    def __getitem__(self, name: str) -> AssumptionCheck:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def failures(self) -> list:
        return [c for c in self.checks if not c.ok]

    def to_text(self) -> str:
        lines = []
        for c in self.checks:
            tag = "pass" if c.ok else "FAIL"
            lines.append(f"{c.name:5s} {tag}  {c.detail}")
        return "\n".join(lines)

    def to_rows(self) -> list:
        return [(c.name, "pass" if c.ok else "fail", c.margin, c.detail) for c in self.checks]


def check_assumptions(params: ModelParams, consts: Optional[GrowthConstants] = None) -> AssumptionReport:
    """Report which modelling assumptions hold, with the margin of the coercivity condition."""
    consts = consts or compute_growth_constants(params)
    A, B = params.A, params.B
    a1 = params.chi_phi >= 0 and params.chi_sigma > 0 and A > 0 and B > 0 and params.K > 0
    checks = [AssumptionCheck(
        "A1", a1,
        f"chi_phi={params.chi_phi:g} >= 0, chi_sigma={params.chi_sigma:g}, A={A:g}, B={B:g}, K={params.K:g} > 0")]
    checks.append(AssumptionCheck("A2", consts.R0 > 0, f"linear growth of sources with R0={consts.R0:g}"))
    n0, _ = params.n_bounds
    m1 = params.m0 + 0.5 * params.M * (1.0 + params.trunc) ** 2
    checks.append(AssumptionCheck(
        "A3", params.m0 > 0 and n0 > 0,
        f"m in [{params.m0:g}, {m1:g}], n = {n0:g}", margin=min(params.m0, n0)))
    rhs = 4.0 * params.chi_phi**2 / (params.chi_sigma * consts.R1) if consts.R1 > 0 else math.inf
    if params.chi_phi == 0:
        rhs = 0.0
    margin = A - rhs
    checks.append(AssumptionCheck(
        "A4", consts.R1 > 0 and consts.R2 >= 0,
        f"psi >= R1 t^2 - R2 with R1={consts.R1:g}, R2={consts.R2:g}; psi_i' <= R3(1+|t|) with R3={consts.R3:g}"))
    checks.append(AssumptionCheck(
        "A4_3", margin > 0, f"A={A:g} > 4 chi_phi^2/(chi_sigma R1)={rhs:g}",
        margin=math.inf if params.chi_phi == 0 else margin))
    return AssumptionReport(tuple(checks))


@dataclass(frozen=True)
class DtStar:
    """Stability time-step bound and the constants it is built from."""

    dt_star: float
    candidates: tuple
    c: dict = field(default_factory=dict)

    @property
    def argmin(self) -> int:
        return int(np.argmin(self.candidates))


def compute_dt_star(params: ModelParams, consts: Optional[GrowthConstants] = None,
                    n0: Optional[float] = None) -> DtStar:
    """Time-step restriction of the stability estimate.

    Returns the minimum of ``B/(2 c5)``, ``chi_sigma/(4 c4)`` and
    ``(A R1 - 4 chi_phi^2/chi_sigma)/c7`` together with all constants.

    Raises
    ------
    AssumptionError
        If ``A R1 - 4 chi_phi^2/chi_sigma <= 0`` or ``m0 <= 0``.
    """
    consts = consts or compute_growth_constants(params)
    A, B = params.A, params.B
    chi_p, chi_s, K = params.chi_phi, params.chi_sigma, params.K
    if n0 is None:
        n0 = params.n_bounds[0]
    gap = A * consts.R1 - 4.0 * chi_p**2 / chi_s
    if not gap > 0:
        raise AssumptionError(
            f"(A4_3) violated: A R1 = {A * consts.R1:g} must exceed 4 chi_phi^2/chi_sigma = {4 * chi_p**2 / chi_s:g}")
    if not params.m0 > 0:
        raise AssumptionError(f"(A3) mobility floor m0 must be positive, got {params.m0}")
    trace = K * consts.C_tr**2 * (chi_p**2 / (2.0 * chi_s) + 1.0)
    c = {
        "c1": params.m0 / 2.0,
        "c2": n0 * chi_s**2 / 2.0,
        "c3": K * chi_s / 4.0,
        "c4": 3.0 * consts.R0**2 + 1.5 * chi_s**2 + 4.0 * chi_p**2,
        "c5": 2.0 * B**2 / params.m0 + trace + n0 * chi_p**2,
        "c6": 4.0 * A**2 * consts.R3**2,
        "c7": 4.0 * A**2 * consts.R3**2 + 3.0 * consts.R0**2 + 1.5 * chi_p**2 + trace,
    }
    candidates = (B / (2.0 * c["c5"]), chi_s / (4.0 * c["c4"]), gap / c["c7"])
    return DtStar(min(candidates), candidates, c)


def continuous_dependence_dt_bound(params: ModelParams, consts: Optional[GrowthConstants] = None) -> float:
    """Largest admissible step (exclusive) for continuous dependence on the data."""
    consts = consts or compute_growth_constants(params)
    A, B = params.A, params.B
    denom = (2.0 * A**2 * consts.L_psi1_prime**2 + 4.0 * params.chi_phi**2
             + 3.0 * B * (consts.L_gamma_phi + consts.L_gamma_sigma))
    return math.inf if denom == 0 else B / denom
