"""
Condition checker
-----------------
Lambda^3_t(y), Lambda^4_t(y) at a derivative point, the key condition

    Lambda^4(y) <= -c |Lambda^3(y)| + epsilon     for all unit y in R^n,

its three sufficient conditions, and the Lipschitz propagation constants
Kbar0^2 = (K0^2 + 1) exp(C_K T) - 1 and the per-node schedule K_i.

For n = 1 the unit sphere is {-1, +1} and the key-condition verdict is exact.
For n >= 2 directions are sampled (coordinate directions, uniform draws, then
hill climbing around the worst one); a FAIL carries a counterexample, a PASS
is sampled evidence.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg import eigh

from .core import DerivativePoint, ProblemSpec
from .derivatives import derivative_point
from .errors import DimensionMismatchError

logger = logging.getLogger(__name__)

UNIT_TOLERANCE = 1e-12
SUFFICIENT_2_TOL = 1e-10
MARGIN_TOLERANCE = 1e-12
_REFINE_BATCH = 4
_REFINE_STEP = 0.3
_REFINE_SHRINK = 0.7
_REFINE_MIN_STEP = 1e-8


# ----------------------------
# Lambda^3 / Lambda^4
# ----------------------------
def _lambda_batch(dp: DerivativePoint, directions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Lambda^3 and Lambda^4 for a batch of directions of shape (S, n)."""
    Y = np.atleast_2d(np.asarray(directions, dtype=float))
    if Y.shape[1] != dp.n:
        raise DimensionMismatchError(f"direction has length {Y.shape[1]}, expected n={dp.n}")
    B, P, F = dp.dz_b, dp.dy_sigma, dp.dz_f
    Bty = Y @ B                                   # (B^T y)_j
    Py = Y @ P.T                                  # (P y)_j
    FY = np.einsum("ilj,sl->sij", F, Y)           # (F_i^T y)_j
    trace_fb = np.einsum("ikj,kj->i", F, B)       # tr(F_i B^T)
    inner = trace_fb[None, :] - np.einsum("sj,sij->si", Bty, FY) + np.einsum("sj,sij->si", Py, FY)
    lam3 = np.sum(Y * inner, axis=1) + Bty @ dp.dx_sigma + Y @ dp.dy_b
    lam4 = np.sum(B * B) - np.sum(Bty * Bty, axis=1) + 2.0 * np.sum(Bty * Py, axis=1)
    return lam3, lam4


def _unit(y, n: int) -> np.ndarray:
    y = np.asarray(y, dtype=float).reshape(-1)
    if y.shape[0] != n:
        raise DimensionMismatchError(f"direction has length {y.shape[0]}, expected n={n}")
    if abs(np.linalg.norm(y) - 1.0) > UNIT_TOLERANCE:
        raise ValueError(f"direction must be a unit vector, |y| = {np.linalg.norm(y)!r}")
    return y


def lambda3(dp: DerivativePoint, y) -> float:
    lam3, _ = _lambda_batch(dp, _unit(y, dp.n)[None, :])
    return float(lam3[0])


def lambda4(dp: DerivativePoint, y) -> float:
    _, lam4 = _lambda_batch(dp, _unit(y, dp.n)[None, :])
    return float(lam4[0])


def lambda3_bound(dp: DerivativePoint) -> float:
    """Frobenius upper bound on sup_{|y|=1} |Lambda^3(y)|."""
    nb = np.linalg.norm(dp.dz_b)
    nf = math.sqrt(float(np.sum(dp.dz_f ** 2)))
    return float(nf * (2.0 * nb + np.linalg.norm(dp.dy_sigma))
                 + np.linalg.norm(dp.dx_sigma) * nb + np.linalg.norm(dp.dy_b))


# ----------------------------
# Key condition
# ----------------------------
@dataclass(frozen=True)
class StatePoint:
    t: float
    x: float
    y: np.ndarray
    z: np.ndarray

    def to_dict(self) -> dict:
        return {"t": float(self.t), "x": float(self.x),
                "y_state": np.asarray(self.y).tolist(), "z": np.asarray(self.z).tolist()}


@dataclass(frozen=True)
class SamplePlan:
    state_points: tuple
    sphere_samples: int = 64
    refine_iters: int = 50
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "state_points", tuple(self.state_points))
        if not self.state_points:
            raise ValueError("sample plan needs at least one state point")
        n = np.asarray(self.state_points[0].y).reshape(-1).shape[0]
        if self.sphere_samples < 2 * n:
            raise ValueError(f"sphere_samples must be >= 2n = {2 * n}")
        if self.refine_iters < 0:
            raise ValueError("refine_iters must be >= 0")

    @classmethod
    def default(cls, spec: ProblemSpec, points: int = 8, sphere_samples: int | None = None,
                refine_iters: int = 50, seed: int = 0, x_range: tuple = (-2.0, 2.0)) -> "SamplePlan":
        """Times spread over [0, T], states drawn from a seeded normal."""
        rng = np.random.default_rng(seed)
        times = np.linspace(0.0, spec.T, points)
        xs = np.linspace(x_range[0], x_range[1], points)
        states = [
            StatePoint(float(t), float(x), rng.normal(size=spec.n), rng.normal(size=(spec.n, spec.d)))
            for t, x in zip(times, xs)
        ]
        if sphere_samples is None:
            sphere_samples = max(64, 2 * spec.n)
        return cls(tuple(states), sphere_samples, refine_iters, seed)


@dataclass(frozen=True)
class ConditionReport:
    passed: bool
    c: float
    epsilon: float
    worst_margin: float
    worst_point: dict
    samples_evaluated: int
    mode: str

    def to_dict(self) -> dict:
        return {
            "passed": bool(self.passed),
            "c": float(self.c),
            "epsilon": float(self.epsilon),
            "worst_margin": float(self.worst_margin),
            "worst_point": self.worst_point,
            "samples_evaluated": int(self.samples_evaluated),
            "mode": self.mode,
        }


def _margins(dp: DerivativePoint, directions: np.ndarray, c: float, epsilon: float) -> np.ndarray:
    lam3, lam4 = _lambda_batch(dp, directions)
    return -lam4 - c * np.abs(lam3) + epsilon


def _normalize(rows: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(rows, axis=1, keepdims=True)
    norms[norms == 0.0] = 1.0
    return rows / norms


def scan_directions(dp: DerivativePoint, c: float, epsilon: float, sphere_samples: int,
                    refine_iters: int, rng: np.random.Generator) -> tuple[float, np.ndarray, int]:
    """Worst margin over unit directions at one derivative point.

    Returns (worst margin, worst direction, directions evaluated).
    """
    n = dp.n
    eye = np.eye(n)
    coordinate = np.concatenate([eye, -eye])
    if n == 1:
        margins = _margins(dp, coordinate, c, epsilon)
        k = int(np.argmin(margins))
        return float(margins[k]), coordinate[k], 2

    extra = max(sphere_samples - 2 * n, 0)
    directions = np.concatenate([coordinate, _normalize(rng.normal(size=(extra, n)))])
    margins = _margins(dp, directions, c, epsilon)
    k = int(np.argmin(margins))
    best, best_dir = float(margins[k]), directions[k]
    evaluated = directions.shape[0]

    step = _REFINE_STEP
    for _ in range(refine_iters):
        candidates = _normalize(best_dir[None, :] + step * rng.normal(size=(_REFINE_BATCH, n)))
        cand_margins = _margins(dp, candidates, c, epsilon)
        evaluated += _REFINE_BATCH
        k = int(np.argmin(cand_margins))
        if cand_margins[k] < best:
            best, best_dir = float(cand_margins[k]), candidates[k]
        else:
            step = max(step * _REFINE_SHRINK, _REFINE_MIN_STEP)
    return best, best_dir, evaluated


def _report(results: Sequence[tuple], points: Sequence[StatePoint], c: float, epsilon: float,
            n: int) -> ConditionReport:
    # first index wins ties, so the reduction does not depend on worker order
    worst = min(range(len(results)), key=lambda i: (results[i][0], i))
    margin, direction, _ = results[worst]
    where = points[worst].to_dict()
    where["direction"] = np.asarray(direction).tolist()
    return ConditionReport(
        passed=bool(margin >= -MARGIN_TOLERANCE),
        c=float(c),
        epsilon=float(epsilon),
        worst_margin=float(margin),
        worst_point=where,
        samples_evaluated=int(sum(r[2] for r in results)),
        mode="exact" if n == 1 else "sampled",
    )


def check_key_condition(spec: ProblemSpec, c: float, plan: SamplePlan, epsilon: float = 0.0,
                        threads: int = 1) -> ConditionReport:
    """Sampled (exact for n = 1) check of the key condition with slack epsilon."""
    if not c > 0:
        raise ValueError("margin constant c must be positive")
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")

    def run(index: int):
        p = plan.state_points[index]
        dp = derivative_point(spec, p.t, p.x, p.y, p.z)
        rng = np.random.default_rng([plan.seed, index])
        return scan_directions(dp, c, epsilon, plan.sphere_samples, plan.refine_iters, rng)

    indices = range(len(plan.state_points))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, indices))
    else:
        results = [run(i) for i in indices]
    report = _report(results, plan.state_points, c, epsilon, spec.n)
    logger.info("key condition for %s (c=%g, eps=%g): %s, worst margin %.6g",
                spec.name, c, epsilon, "PASS" if report.passed else "FAIL", report.worst_margin)
    return report


def check_key_condition_at(dp: DerivativePoint, c: float, epsilon: float = 0.0,
                           sphere_samples: int = 64, refine_iters: int = 50,
                           seed: int = 0) -> ConditionReport:
    """Key condition at a single derivative point."""
    if not c > 0:
        raise ValueError("margin constant c must be positive")
    rng = np.random.default_rng([seed, 0])
    result = scan_directions(dp, c, epsilon, max(sphere_samples, 2 * dp.n), refine_iters, rng)
    origin = StatePoint(0.0, 0.0, np.zeros(dp.n), np.zeros((dp.n, dp.d)))
    return _report([result], [origin], c, epsilon, dp.n)


def default_margin_constant(spec: ProblemSpec) -> float:
    """c = 1/K, the normalisation used with the small-time estimate."""
    return 1.0 / spec.K


# ----------------------------
# Sufficient conditions
# ----------------------------
def check_sufficient_1(dp: DerivativePoint, c: float) -> bool:
    """[dz_b][dz_b]^T - [dy_sigma]^T[dz_b]^T - [dz_b][dy_sigma] >= (|dz_b|^2 + c) Id."""
    B, P = dp.dz_b, dp.dy_sigma
    S = B @ B.T - P.T @ B.T - B @ P
    S = 0.5 * (S + S.T)
    smallest = float(eigh(S, eigvals_only=True)[0])
    return smallest >= float(np.sum(B * B)) + c


def sufficient_1_key_constant(dp: DerivativePoint, c: float) -> float:
    """Key-condition constant implied by the first sufficient condition with margin c.

    That condition gives Lambda^4 <= -c on the sphere; dividing by the Lambda^3
    scale turns it into Lambda^4 <= -c' |Lambda^3|.
    """
    return c / max(1.0, lambda3_bound(dp))


def check_sufficient_2(dp: DerivativePoint, tol: float = SUFFICIENT_2_TOL) -> bool:
    """dy_b = 0, dz_b = 0 and [dy_sigma]^T [dz_f^i]^T = 0 for every i."""
    if np.linalg.norm(dp.dy_b) > tol or np.linalg.norm(dp.dz_b) > tol:
        return False
    for Fi in dp.dz_f:
        if np.linalg.norm(dp.dy_sigma.T @ Fi.T) > tol:
            return False
    return True


def check_sufficient_3(dp: DerivativePoint, c: float) -> bool:
    """n = 1: -dz_b.dy_sigma >= c |dy_b + dz_f.dy_sigma + dz_b.dx_sigma|."""
    if dp.n != 1:
        raise DimensionMismatchError(f"third sufficient condition needs n = 1, got n = {dp.n}")
    b_row = dp.dz_b[0]
    f_row = dp.dz_f[0, 0]
    p_col = dp.dy_sigma[:, 0]
    lhs = -float(b_row @ p_col)
    rhs = c * abs(float(dp.dy_b[0] + f_row @ p_col + b_row @ dp.dx_sigma))
    return lhs >= rhs


def check_one_dimensional(dp: DerivativePoint, tol: float = SUFFICIENT_2_TOL) -> bool:
    """Older n = d = 1 condition: dy_sigma dz_b = 0 and dy_b + dx_sigma dz_b + dy_sigma dz_f = 0."""
    if dp.n != 1 or dp.d != 1:
        raise DimensionMismatchError("one-dimensional condition needs n = d = 1")
    b, p, s = dp.dz_b[0, 0], dp.dy_sigma[0, 0], dp.dx_sigma[0]
    first = abs(p * b) <= tol
    second = abs(dp.dy_b[0] + s * b + p * dp.dz_f[0, 0, 0]) <= tol
    return bool(first and second)


@dataclass(frozen=True)
class SufficientReport:
    condition: str
    passed: bool
    applicable: bool
    points_evaluated: int
    failing_point: dict | None = None
    c: float | None = None

    def to_dict(self) -> dict:
        return {
            "condition": self.condition,
            "passed": bool(self.passed),
            "applicable": bool(self.applicable),
            "points_evaluated": int(self.points_evaluated),
            "failing_point": self.failing_point,
            "c": None if self.c is None else float(self.c),
        }


SUFFICIENT_CHECKS = {
    "sufficient_1": lambda dp, c, tol: check_sufficient_1(dp, c),
    "sufficient_2": lambda dp, c, tol: check_sufficient_2(dp, tol),
    "sufficient_3": lambda dp, c, tol: check_sufficient_3(dp, c),
    "one_dimensional": lambda dp, c, tol: check_one_dimensional(dp, tol),
}


def sufficient_applicable(name: str, n: int, d: int) -> bool:
    if name == "sufficient_3":
        return n == 1
    if name == "one_dimensional":
        return n == 1 and d == 1
    return True


def check_sufficient_over_plan(spec: ProblemSpec, name: str, c: float, plan: SamplePlan,
                               tol: float = SUFFICIENT_2_TOL) -> SufficientReport:
    """Run one sufficient condition at every state point of the plan."""
    if not sufficient_applicable(name, spec.n, spec.d):
        return SufficientReport(name, passed=False, applicable=False, points_evaluated=0, c=c)
    check = SUFFICIENT_CHECKS[name]
    for count, p in enumerate(plan.state_points, start=1):
        dp = derivative_point(spec, p.t, p.x, p.y, p.z)
        if not check(dp, c, tol):
            return SufficientReport(name, passed=False, applicable=True, points_evaluated=count,
                                    failing_point=p.to_dict(), c=c)
    return SufficientReport(name, passed=True, applicable=True,
                            points_evaluated=len(plan.state_points), c=c)


# ----------------------------
# Linear coefficients
# ----------------------------
@dataclass(frozen=True)
class LinearCoefficients:
    """Constant coefficients of the linear FBSDE

        B = a1 X + b1 Y + tr(g1 Z),   Gamma = a2 X + b2 Y,
        F = a3 X + b3 Y + [tr(g3[i] Z)]_i,   terminal G X.

    Shapes: a1 scalar, b1 (n,), g1 (d,n), a2 (d,), b2 (d,n), a3 (n,),
    b3 (n,n), g3 (n,d,n), G (n,).
    """

    a1: float
    b1: np.ndarray
    g1: np.ndarray
    a2: np.ndarray
    b2: np.ndarray
    a3: np.ndarray
    b3: np.ndarray
    g3: np.ndarray
    G: np.ndarray
    sigma0: np.ndarray = field(default=None)

    def __post_init__(self):
        b1 = np.array(self.b1, dtype=float).reshape(-1)
        n = b1.shape[0]
        g1 = np.array(self.g1, dtype=float)
        d = g1.size // n
        shapes = {
            "b1": (b1, (n,)),
            "g1": (g1.reshape(d, n), (d, n)),
            "a2": (np.array(self.a2, dtype=float).reshape(-1), (d,)),
            "b2": (np.array(self.b2, dtype=float).reshape(d, -1), (d, n)),
            "a3": (np.array(self.a3, dtype=float).reshape(-1), (n,)),
            "b3": (np.array(self.b3, dtype=float).reshape(n, -1), (n, n)),
            "g3": (np.array(self.g3, dtype=float).reshape(n, d, -1), (n, d, n)),
            "G": (np.array(self.G, dtype=float).reshape(-1), (n,)),
            "sigma0": (np.zeros(d) if self.sigma0 is None
                       else np.array(self.sigma0, dtype=float).reshape(-1), (d,)),
        }
        for name, (arr, shape) in shapes.items():
            if arr.shape != shape:
                raise DimensionMismatchError(f"linear coefficient {name} has shape {arr.shape}, expected {shape}")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "a1", float(self.a1))

    @property
    def n(self) -> int:
        return self.b1.shape[0]

    @property
    def d(self) -> int:
        return self.a2.shape[0]

    def derivative_point(self) -> DerivativePoint:
        return DerivativePoint(
            dz_b=self.g1.T,
            dy_b=self.b1,
            dx_sigma=self.a2,
            dy_sigma=self.b2,
            dz_f=self.g3.transpose(0, 2, 1),
        )

    # vectorized coefficient maps
    def b(self, t, x, y, z):
        return self.a1 * x + y @ self.b1 + np.einsum("jk,nkj->n", self.g1, z)

    def sigma(self, t, x, y):
        return x[:, None] * self.a2[None, :] + y @ self.b2.T + self.sigma0[None, :]

    def f(self, t, x, y, z):
        return x[:, None] * self.a3[None, :] + y @ self.b3.T + np.einsum("ijk,nkj->ni", self.g3, z)

    def g(self, x):
        return x[:, None] * self.G[None, :]


# ----------------------------
# Lipschitz propagation
# ----------------------------
def kbar0(K0: float, C_K: float, T: float) -> float:
    """Kbar0 = sqrt((K0^2 + 1) exp(C_K T) - 1)."""
    if K0 < 0 or C_K < 0 or T < 0:
        raise ValueError("kbar0 needs K0, C_K, T >= 0")
    return math.sqrt(max((K0 * K0 + 1.0) * math.exp(C_K * T) - 1.0, 0.0))


def lipschitz_schedule(K0: float, C_K: float, T: float, m: int) -> list[float]:
    """Squared bounds on Lip(g_i), listed for i = m down to 0."""
    if m < 1:
        raise ValueError("partition count m must be >= 1")
    if K0 < 0 or C_K < 0 or T < 0:
        raise ValueError("lipschitz_schedule needs K0, C_K, T >= 0")
    base = K0 * K0 + 1.0
    return [base * math.exp(C_K * (T - i * T / m)) - 1.0 for i in range(m, -1, -1)]
