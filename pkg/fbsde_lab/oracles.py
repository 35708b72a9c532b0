"""
Oracle problems
---------------
Benchmark FBSDEs with closed-form decoupling fields or a brute-force
reference, each with the stored condition profile the checker must reproduce
(at c = 1):

    name               key   sufficient_1  sufficient_2  sufficient_3
    example24          F     F             F             F
    brownian_identity  T     F             T             T
    brownian_square    T     F             T             T
    coupled_s3         T     T             F             T
    linear_constant    T     F             F             T
    decoupled_f_no_z   T     F             T             n/a (n = 2)
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Callable

import numpy as np
from scipy.integrate import solve_ivp

from .conditions import LinearCoefficients
from .core import (CoefficientSet, DerivativePoint, DerivativeSet, Dimensions, GridFunction,
                   ProblemSpec, initial_state_from_dict)
from .errors import ConfigInvalidError, NoAnalyticFormError, UnknownProblemError
from .global_solver import solve
from .small_time import DiscretizationParams, solve_one_step

logger = logging.getLogger(__name__)

PROFILE_C = 1.0
REFERENCE_INNER_TOL = 1e-13


@dataclass(frozen=True)
class AnalyticForm:
    """field(t, x, params) -> (u[n], v[n, d]); path(t, params) -> (X_t, Y_t[n]) when deterministic."""

    field: Callable[[float, float, dict], tuple]
    path: Callable[[float, dict], tuple] | None = None


@dataclass(frozen=True)
class OracleEntry:
    name: str
    spec_factory: Callable[[dict], ProblemSpec]
    defaults: dict
    condition_profile: dict
    analytic: AnalyticForm | None = None
    description: str = ""
    params: dict = field(default_factory=dict)
    grid_window: bool = False          # x_lo / x_hi must equal the discretization grid

    @property
    def resolved(self) -> dict:
        return {**self.defaults, **self.params}

    @property
    def spec(self) -> ProblemSpec:
        return self.spec_factory(self.resolved)

    @property
    def has_analytic(self) -> bool:
        return self.analytic is not None

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "parameters": _jsonable(self.resolved),
            "condition_profile": dict(self.condition_profile),
            "has_analytic": self.has_analytic,
        }


def _jsonable(params: dict) -> dict:
    return {k: (v if isinstance(v, (int, float, str, dict, list, type(None))) else str(v))
            for k, v in sorted(params.items())}


def _constant_derivatives(**blocks) -> DerivativeSet:
    dp = DerivativePoint(**blocks)
    return DerivativeSet(analytic=lambda t, x, y, z: dp)


def _zeros_n(x, n: int) -> np.ndarray:
    return np.zeros((x.shape[0], n))


# ----------------------------
# example24: X_t = x0 - int Y, Y_t = X_T - int Z dW
# ----------------------------
def _example24(p: dict) -> ProblemSpec:
    coeffs = CoefficientSet(
        b=lambda t, x, y, z: -y[:, 0],
        sigma=lambda t, x, y: _zeros_n(x, 1),
        f=lambda t, x, y, z: _zeros_n(x, 1),
        g=lambda x: x[:, None].copy(),
    )
    derivs = _constant_derivatives(dz_b=[[0.0]], dy_b=[-1.0], dx_sigma=[0.0],
                                   dy_sigma=[[0.0]], dz_f=[[[0.0]]])
    return ProblemSpec(Dimensions(1, 1), coeffs, float(p["T"]), initial_state_from_dict(p["x0"]),
                       K=1.0, K0=1.0, derivs=derivs, name="example24")


def _example24_field(t, x, p):
    return np.array([x / (1.0 + p["T"] - t)]), np.zeros((1, 1))


def _example24_path(t, p):
    x0 = float(p["x0"])
    T = float(p["T"])
    return x0 * (1.0 - t / (1.0 + T)), np.array([x0 / (1.0 + T)])


# ----------------------------
# Decoupled Brownian problems
# ----------------------------
def _brownian(p: dict, terminal, K0: float, name: str) -> ProblemSpec:
    s = float(p["sigma"])
    coeffs = CoefficientSet(
        b=lambda t, x, y, z: np.zeros(x.shape[0]),
        sigma=lambda t, x, y: np.full((x.shape[0], 1), s),
        f=lambda t, x, y, z: _zeros_n(x, 1),
        g=terminal,
    )
    derivs = _constant_derivatives(dz_b=[[0.0]], dy_b=[0.0], dx_sigma=[0.0],
                                   dy_sigma=[[0.0]], dz_f=[[[0.0]]])
    return ProblemSpec(Dimensions(1, 1), coeffs, float(p["T"]), initial_state_from_dict(p["x0"]),
                       K=max(1.0, abs(s)), K0=K0, derivs=derivs, name=name)


def _brownian_identity(p: dict) -> ProblemSpec:
    return _brownian(p, lambda x: x[:, None].copy(), 1.0, "brownian_identity")


def _truncated_square(lo: float, hi: float):
    def g(x):
        inner = np.clip(x, lo, hi)
        return (inner ** 2 + 2.0 * inner * (x - inner))[:, None]
    return g


def _brownian_square(p: dict) -> ProblemSpec:
    lo, hi = float(p["x_lo"]), float(p["x_hi"])
    K0 = 2.0 * max(abs(lo), abs(hi))
    return _brownian(p, _truncated_square(lo, hi), K0, "brownian_square")


# ----------------------------
# coupled_s3: b = z, sigma = kappa - y, g = sin
# ----------------------------
def _coupled_s3(p: dict) -> ProblemSpec:
    kappa = float(p["kappa"])
    coeffs = CoefficientSet(
        b=lambda t, x, y, z: z[:, 0, 0].copy(),
        sigma=lambda t, x, y: kappa - y,
        f=lambda t, x, y, z: _zeros_n(x, 1),
        g=lambda x: np.sin(x)[:, None],
    )
    derivs = _constant_derivatives(dz_b=[[1.0]], dy_b=[0.0], dx_sigma=[0.0],
                                   dy_sigma=[[-1.0]], dz_f=[[[0.0]]])
    return ProblemSpec(Dimensions(1, 1), coeffs, float(p["T"]), initial_state_from_dict(p["x0"]),
                       K=1.0, K0=1.0, derivs=derivs, name="coupled_s3")


# ----------------------------
# linear_constant: constant coefficient matrices, scalar case
# ----------------------------
def linear_coefficients(p: dict) -> LinearCoefficients:
    return LinearCoefficients(
        a1=p["alpha1"], b1=[p["beta1"]], g1=[[p["gamma1"]]],
        a2=[p["alpha2"]], b2=[[p["beta2"]]],
        a3=[p["alpha3"]], b3=[[p["beta3"]]], g3=[[[p["gamma3"]]]],
        G=[p["G"]], sigma0=[p["sigma0"]],
    )


def _linear_constant(p: dict) -> ProblemSpec:
    lin = linear_coefficients(p)
    dp = lin.derivative_point()
    K = max(1.0, abs(lin.a1) + np.abs(lin.b1).sum() + np.abs(lin.g1).sum(),
            np.abs(lin.a2).sum() + np.abs(lin.b2).sum(),
            np.abs(lin.a3).sum() + np.abs(lin.b3).sum() + np.abs(lin.g3).sum())
    coeffs = CoefficientSet(b=lin.b, sigma=lin.sigma, f=lin.f, g=lin.g)
    return ProblemSpec(Dimensions(lin.n, lin.d), coeffs, float(p["T"]),
                       initial_state_from_dict(p["x0"]), K=float(K),
                       K0=float(np.linalg.norm(lin.G)),
                       derivs=DerivativeSet(analytic=lambda t, x, y, z: dp), name="linear_constant")


_LINEAR_KEYS = ("T", "alpha1", "beta1", "gamma1", "alpha2", "beta2", "sigma0",
                "alpha3", "beta3", "gamma3", "G")


@lru_cache(maxsize=16)
def _riccati(values: tuple):
    """u(t, x) = p(t) x + q(t) for the scalar linear FBSDE, integrated backward from T."""
    T, a1, b1, g1, a2, b2, s0, a3, b3, g3, G = values

    def rhs(t, state):
        p, q = state
        zx = p * (a2 + b2 * p)             # x-coefficient of Z
        zc = p * (b2 * q + s0)             # constant part of Z
        dp = -p * (a1 + b1 * p + g1 * zx) - (a3 + b3 * p + g3 * zx)
        dq = -p * (b1 * q + g1 * zc) - (b3 * q + g3 * zc)
        return [dp, dq]

    sol = solve_ivp(rhs, (T, 0.0), [G, 0.0], method="DOP853", rtol=1e-12, atol=1e-14, dense_output=True)
    if not sol.success:
        raise RuntimeError(f"Riccati integration failed: {sol.message}")
    return sol.sol


def _linear_field(t, x, p):
    curve = _riccati(tuple(float(p[k]) for k in _LINEAR_KEYS))
    pt, qt = curve(t)
    y = pt * x + qt
    z = pt * (p["alpha2"] * x + p["beta2"] * y + p["sigma0"])
    return np.array([y]), np.array([[z]])


# ----------------------------
# decoupled_f_no_z: n = 2 > d = 1, driver free of z
# ----------------------------
def _decoupled_f_no_z(p: dict) -> ProblemSpec:
    coeffs = CoefficientSet(
        b=lambda t, x, y, z: -0.5 * x,
        sigma=lambda t, x, y: (0.4 + 0.1 * np.sin(y[:, 0]))[:, None],
        f=lambda t, x, y, z: np.stack([0.3 * np.sin(x) - 0.2 * y[:, 0],
                                       0.1 * y[:, 0] - 0.3 * y[:, 1]], axis=1),
        g=lambda x: np.stack([np.tanh(x), 0.5 * x], axis=1),
    )

    def derivs(t, x, y, z):
        return DerivativePoint(dz_b=np.zeros((2, 1)), dy_b=np.zeros(2), dx_sigma=np.zeros(1),
                               dy_sigma=np.array([[0.1 * math.cos(y[0]), 0.0]]),
                               dz_f=np.zeros((2, 2, 1)))

    return ProblemSpec(Dimensions(2, 1), coeffs, float(p["T"]), initial_state_from_dict(p["x0"]),
                       K=1.0, K0=1.0, derivs=DerivativeSet(analytic=derivs), name="decoupled_f_no_z")


def _profile(key, s1, s2, s3) -> dict:
    return {"c": PROFILE_C, "key": key, "sufficient_1": s1, "sufficient_2": s2, "sufficient_3": s3}


REGISTRY: dict[str, OracleEntry] = {
    entry.name: entry
    for entry in (
        OracleEntry(
            "example24", _example24, {"T": 1.0, "x0": 1.0},
            _profile(False, False, False, False),
            AnalyticForm(_example24_field, _example24_path),
            "monotone example violating the key condition; Lambda3 = -y, Lambda4 = 0",
        ),
        OracleEntry(
            "brownian_identity", _brownian_identity, {"T": 1.0, "x0": 0.0, "sigma": 1.0},
            _profile(True, False, True, True),
            AnalyticForm(lambda t, x, p: (np.array([x]), np.array([[p["sigma"]]]))),
            "decoupled, g(x) = x: u = x, v = sigma",
        ),
        OracleEntry(
            "brownian_square", _brownian_square,
            {"T": 1.0, "x0": 0.0, "sigma": 1.0, "x_lo": -4.0, "x_hi": 4.0},
            _profile(True, False, True, True),
            AnalyticForm(lambda t, x, p: (np.array([x * x + p["sigma"] ** 2 * (p["T"] - t)]),
                                          np.array([[2.0 * x * p["sigma"]]]))),
            "decoupled, g(x) = x^2 truncated linearly outside the grid: u = x^2 + (T - t), v = 2x",
            grid_window=True,
        ),
        OracleEntry(
            "coupled_s3", _coupled_s3, {"T": 0.5, "x0": 0.0, "kappa": 1.0},
            _profile(True, True, False, True),
            None,
            "b = z, sigma = kappa - y, g = sin; dz_b dy_sigma = -1",
        ),
        OracleEntry(
            "linear_constant", _linear_constant,
            {"T": 1.0, "x0": 1.0, "alpha1": -0.5, "beta1": 0.2, "gamma1": 0.5,
             "alpha2": 0.3, "beta2": -0.8, "sigma0": 0.0,
             "alpha3": 0.1, "beta3": -0.2, "gamma3": 0.1, "G": 1.0},
            _profile(True, False, False, True),
            AnalyticForm(_linear_field),
            "linear FBSDE with constant coefficients; u = p(t) x + q(t) from the Riccati pair",
        ),
        OracleEntry(
            "decoupled_f_no_z", _decoupled_f_no_z, {"T": 1.0, "x0": 0.0},
            _profile(True, False, True, None),
            None,
            "n = 2, d = 1 with a driver free of z",
        ),
    )
}


def get_problem(name: str, params: dict | None = None, grid: DiscretizationParams | None = None,
                **overrides) -> OracleEntry:
    """Registry entry with parameter overrides.

    For entries whose coefficients depend on the grid window, ``grid`` fills
    x_lo / x_hi and rejects values that disagree with it.
    """
    if name not in REGISTRY:
        raise UnknownProblemError(f"unknown problem {name!r}; registered: {', '.join(sorted(REGISTRY))}")
    entry = REGISTRY[name]
    merged = {**(params or {}), **overrides}
    unknown = sorted(set(merged) - set(entry.defaults))
    if unknown:
        raise ConfigInvalidError(f"problem {name!r} has no parameter(s) {unknown}")
    if grid is not None and entry.grid_window:
        for key in ("x_lo", "x_hi"):
            value = float(getattr(grid, key))
            if key in merged and float(merged[key]) != value:
                raise ConfigInvalidError(
                    f"problem {name!r}: {key}={merged[key]} disagrees with the grid {key}={value}")
            merged[key] = value
    return replace(entry, params=merged)


def list_problems() -> list[dict]:
    return [REGISTRY[name].to_dict() for name in sorted(REGISTRY)]


def analytic_eval(entry: OracleEntry, t: float, x: float) -> tuple[np.ndarray, np.ndarray]:
    if entry.analytic is None:
        raise NoAnalyticFormError(f"problem {entry.name!r} has no closed-form decoupling field")
    u, v = entry.analytic.field(float(t), float(x), entry.resolved)
    return np.asarray(u, dtype=float), np.asarray(v, dtype=float)


def analytic_grid(entry: OracleEntry, t: float, params: DiscretizationParams) -> GridFunction:
    """Closed-form u(t, .) sampled on the discretization grid."""
    nodes = params.nodes
    values = np.stack([analytic_eval(entry, t, x)[0] for x in nodes])
    return GridFunction(params.x_lo, params.x_hi, params.dx, values)


def verify_entry(entry: OracleEntry, params: DiscretizationParams, t: float, x: float,
                 dt: float) -> tuple[float, float]:
    """One-step residual of the closed form: errors of (y, z) against u(t, x), v(t, x)."""
    spec = entry.spec
    u_next = analytic_grid(entry, t + dt, params)
    y, z, _ = solve_one_step(x, t, dt, u_next, spec, params)
    u, v = analytic_eval(entry, t, x)
    return float(np.linalg.norm(y - u)), float(np.linalg.norm(z - v.reshape(z.shape)))


def refine_params(params: DiscretizationParams, factor: int = 4) -> DiscretizationParams:
    return params.refined(factor)


def brute_force_reference(spec: ProblemSpec, fine_params: DiscretizationParams, m: int = 1,
                          threads: int = 1) -> GridFunction:
    """u(0, .) from the same backward construction with 2m subintervals on the fine grid."""
    fine = replace(fine_params, inner_tol=min(fine_params.inner_tol, REFERENCE_INNER_TOL))
    logger.info("brute-force reference for %s: m=%d, J=%d, dx=%g", spec.name, 2 * m, fine.steps, fine.dx)
    return solve(spec, 2 * m, fine, threads=threads).g_funcs[0]
