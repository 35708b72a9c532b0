"""
Small-time solver
-----------------
Backward induction on one subinterval [t_start, t_end] with J Euler steps.
At every grid node x and time node t_j the pair (y, z) solves the fixed point

    X+(w) = x + b(t, x, y, z) dt + sigma(t, x, y) . w sqrt(dt)
    y     = E_w[u_next(X+(w))] + f(t, x, y, z) dt
    z     = E_w[u_next(X+(w)) w^T] / sqrt(dt)

with w on a tensor Gauss-Hermite rule (q^d nodes). The iteration is damped;
its measured contraction ratio is what estimate_delta0 probes.

Nodes are processed in fixed blocks, so results do not depend on the thread
count.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np
from numpy.polynomial.hermite import hermgauss

from .core import GridFunction, ProblemSpec, grid_node_count
from .errors import (DimensionMismatchError, NoContractionError, NonFiniteOutputError,
                     NotContractingAtFloorError)

logger = logging.getLogger(__name__)

NODE_BLOCK = 256
MAX_QUADRATURE_NODES = 100_000
OUTSIDE_MASS_WARNING = 1e-3          # about the normal mass beyond 3 sigma
CONTRACTION_TARGET = 0.5
DELTA_FLOOR = 1e-6
PROBE_NODES = 5


@dataclass(frozen=True)
class DiscretizationParams:
    steps: int
    x_lo: float
    x_hi: float
    dx: float
    quad_order: int = 8
    inner_tol: float = 1e-12
    inner_max: int = 200
    damping: float = 1.0

    def __post_init__(self):
        if int(self.steps) < 1:
            raise ValueError("steps J must be >= 1")
        if int(self.quad_order) < 2:
            raise ValueError("quad_order must be >= 2")
        if int(self.inner_max) < 2:
            raise ValueError("inner_max must be >= 2 so the contraction ratio is measured")
        if not self.inner_tol > 0:
            raise ValueError("inner_tol must be positive")
        if not 0.0 < self.damping <= 1.0:
            raise ValueError("damping must lie in (0, 1]")
        if not self.x_lo < self.x_hi:
            raise ValueError("grid needs x_lo < x_hi")
        if not self.dx > 0:
            raise ValueError("grid spacing dx must be positive")
        grid_node_count(self.x_lo, self.x_hi, self.dx)

    @property
    def nodes(self) -> np.ndarray:
        return self.x_lo + self.dx * np.arange(grid_node_count(self.x_lo, self.x_hi, self.dx))

    def refined(self, factor: int = 2) -> "DiscretizationParams":
        """factor times more time steps and a factor times finer grid."""
        return replace(self, steps=self.steps * factor, dx=self.dx / factor)

    def halved(self) -> "DiscretizationParams":
        return self.refined(2)

    def sample(self, func) -> GridFunction:
        return GridFunction.sample(func, self.x_lo, self.x_hi, self.dx)

    def to_dict(self) -> dict:
        return {
            "steps": int(self.steps),
            "x_lo": float(self.x_lo),
            "x_hi": float(self.x_hi),
            "dx": float(self.dx),
            "quad_order": int(self.quad_order),
            "inner_tol": float(self.inner_tol),
            "inner_max": int(self.inner_max),
            "damping": float(self.damping),
        }


@lru_cache(maxsize=32)
def gauss_hermite_nodes(q: int, d: int) -> tuple[np.ndarray, np.ndarray]:
    """Tensor rule for a standard normal in R^d: nodes (q^d, d), weights (q^d,)."""
    if q ** d > MAX_QUADRATURE_NODES:
        raise ValueError(f"q^d = {q ** d} quadrature nodes exceeds {MAX_QUADRATURE_NODES}")
    points, weights = hermgauss(q)
    points = points * np.sqrt(2.0)
    weights = weights / np.sqrt(np.pi)
    grids = np.meshgrid(*([points] * d), indexing="ij")
    W = np.stack([g.reshape(-1) for g in grids], axis=1)
    w = weights
    for _ in range(d - 1):
        w = np.kron(w, weights)
    W.setflags(write=False)
    w.setflags(write=False)
    return W, w


@dataclass(frozen=True)
class SegmentSolution:
    t_start: float
    t_end: float
    u: tuple
    v: tuple
    inner_iterations_max_used: int
    max_contraction_ratio: float = 0.0
    outside_mass: float = 0.0

    @property
    def steps(self) -> int:
        return len(self.v)

    @property
    def dt(self) -> float:
        return (self.t_end - self.t_start) / self.steps

    @property
    def times(self) -> np.ndarray:
        return self.t_start + self.dt * np.arange(self.steps + 1)

    def to_dict(self) -> dict:
        return {
            "t_start": float(self.t_start),
            "t_end": float(self.t_end),
            "J": int(self.steps),
            "inner_iterations_max_used": int(self.inner_iterations_max_used),
            "max_contraction_ratio": float(self.max_contraction_ratio),
            "outside_mass": float(self.outside_mass),
            "u": [gf.to_dict() for gf in self.u],
            "v": [gf.to_dict() for gf in self.v],
        }


@dataclass(frozen=True)
class _NodeResult:
    y: np.ndarray
    z: np.ndarray
    iterations: np.ndarray
    ratio: float
    outside_mass: float


def _solve_block(xs: np.ndarray, t: float, dt: float, u_next: GridFunction, spec: ProblemSpec,
                 params: DiscretizationParams, z0: np.ndarray) -> _NodeResult:
    """Damped fixed point at a block of nodes, iterating only the unconverged ones."""
    n, d = spec.n, spec.d
    W, wts = gauss_hermite_nodes(params.quad_order, d)
    sq = math.sqrt(dt)
    lam = params.damping
    N = xs.shape[0]

    y = np.array(u_next(xs), dtype=float).reshape(N, n)
    z = np.array(z0, dtype=float).reshape(N, n, d)
    iterations = np.zeros(N, dtype=np.int64)
    first = np.zeros(N)
    last = np.zeros(N)
    outside = np.zeros(N)
    active = np.arange(N)

    for k in range(1, params.inner_max + 1):
        xa, ya, za = xs[active], y[active], z[active]
        drift = spec.drift(t, xa, ya, za)
        sig = spec.diffusion(t, xa, ya)
        x_plus = (xa + drift * dt)[:, None] + sq * (sig @ W.T)
        U = u_next(x_plus)
        y_new = np.einsum("q,aqi->ai", wts, U) + spec.driver(t, xa, ya, za) * dt
        z_new = np.einsum("q,aqi,qj->aij", wts, U, W) / sq
        y_next = (1.0 - lam) * ya + lam * y_new
        z_next = (1.0 - lam) * za + lam * z_new
        if not (np.all(np.isfinite(y_next)) and np.all(np.isfinite(z_next))):
            raise NonFiniteOutputError(f"fixed-point iterate is not finite at t={t:g}")

        resid = np.maximum(np.linalg.norm(y_next - ya, axis=1),
                           np.linalg.norm((z_next - za).reshape(len(active), -1), axis=1))
        y[active] = y_next
        z[active] = z_next
        iterations[active] = k
        if k == 1:
            first[active] = resid
        last[active] = resid
        # mass leaving the grid, counted only at nodes at least 3 sigma sqrt(dt) from the edges
        reach = 3.0 * np.linalg.norm(sig, axis=1) * sq + np.abs(drift) * dt
        interior = (xa - reach >= params.x_lo) & (xa + reach <= params.x_hi)
        out = (x_plus < params.x_lo) | (x_plus > params.x_hi)
        outside[active] = np.where(interior, out.astype(float) @ wts, 0.0)

        active = active[resid > params.inner_tol]
        if active.size == 0:
            break

    ratios = np.zeros(N)
    multi = (iterations > 1) & (first > 0)
    ratios[multi] = (last[multi] / first[multi]) ** (1.0 / (iterations[multi] - 1))
    if active.size:
        worst = int(active[np.argmax(ratios[active])])
        if ratios[worst] >= 1.0:
            raise NoContractionError(
                f"inner iteration did not contract (ratio {ratios[worst]:.3g}) after "
                f"{params.inner_max} iterations at x={xs[worst]:g}, t={t:g}, dt={dt:g}",
                ratio=float(ratios[worst]), node=worst,
            )
        logger.warning("inner tolerance %g not reached at %d node(s), t=%g (ratio %.3g); accepted",
                       params.inner_tol, active.size, t, float(ratios[active].max()))
    return _NodeResult(y, z, iterations, float(ratios.max(initial=0.0)), float(outside.max(initial=0.0)))


def _solve_nodes(xs: np.ndarray, t: float, dt: float, u_next: GridFunction, spec: ProblemSpec,
                 params: DiscretizationParams, z0: np.ndarray, threads: int = 1) -> _NodeResult:
    starts = list(range(0, xs.shape[0], NODE_BLOCK))

    def run(start: int) -> _NodeResult:
        stop = start + NODE_BLOCK
        try:
            return _solve_block(xs[start:stop], t, dt, u_next, spec, params, z0[start:stop])
        except NoContractionError as exc:
            raise exc.located(node=start + (exc.node or 0)) from exc

    if threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, starts))
    else:
        parts = [run(s) for s in starts]
    return _NodeResult(
        y=np.concatenate([p.y for p in parts]),
        z=np.concatenate([p.z for p in parts]),
        iterations=np.concatenate([p.iterations for p in parts]),
        ratio=max(p.ratio for p in parts),
        outside_mass=max(p.outside_mass for p in parts),
    )


def _check_field(u_next: GridFunction, spec: ProblemSpec) -> None:
    if u_next.width != spec.n:
        raise DimensionMismatchError(f"field has width {u_next.width}, expected n={spec.n}")


def solve_one_step(x: float, t: float, dt: float, u_next: GridFunction, spec: ProblemSpec,
                   params: DiscretizationParams, z_init=None) -> tuple[np.ndarray, np.ndarray, int]:
    """Fixed point (y, z) at a single node; returns (y[n], z[n, d], iterations)."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    _check_field(u_next, spec)
    z0 = np.zeros((1, spec.n, spec.d)) if z_init is None else np.asarray(z_init, dtype=float).reshape(1, spec.n, spec.d)
    res = _solve_block(np.array([float(x)]), t, dt, u_next, spec, params, z0)
    return res.y[0], res.z[0], int(res.iterations[0])


def backward_sweep(terminal: GridFunction, t_start: float, t_end: float, spec: ProblemSpec,
                   params: DiscretizationParams, threads: int = 1,
                   segment: int | None = None) -> SegmentSolution:
    """Fill u[j], v[j] for j = J-1 .. 0 from u[J] = terminal."""
    if not t_start < t_end:
        raise ValueError("backward_sweep needs t_start < t_end")
    _check_field(terminal, spec)
    if (terminal.x_lo, terminal.x_hi, terminal.dx) != (params.x_lo, params.x_hi, params.dx):
        raise ValueError("terminal grid does not match the discretization grid")

    J = params.steps
    dt = (t_end - t_start) / J
    xs = terminal.nodes
    N, n, d = xs.shape[0], spec.n, spec.d

    u: list = [None] * (J + 1)
    v: list = [None] * J
    u[J] = terminal
    z_prev = np.zeros((N, n, d))
    max_iters = 0
    max_ratio = 0.0
    worst_mass = 0.0
    for j in range(J - 1, -1, -1):
        t = t_start + j * dt
        try:
            res = _solve_nodes(xs, t, dt, u[j + 1], spec, params, z_prev, threads)
        except NoContractionError as exc:
            raise exc.located(step=j, segment=segment) from exc
        u[j] = GridFunction(params.x_lo, params.x_hi, params.dx, res.y)
        v[j] = GridFunction(params.x_lo, params.x_hi, params.dx, res.z.reshape(N, n * d))
        z_prev = res.z
        max_iters = max(max_iters, int(res.iterations.max()))
        max_ratio = max(max_ratio, res.ratio)
        worst_mass = max(worst_mass, res.outside_mass)

    if worst_mass > OUTSIDE_MASS_WARNING:
        logger.warning("segment [%g, %g]: %.2e of quadrature mass falls outside [%g, %g]",
                       t_start, t_end, worst_mass, params.x_lo, params.x_hi)
    logger.debug("segment [%g, %g]: max inner iterations %d, contraction ratio %.3g",
                 t_start, t_end, max_iters, max_ratio)
    return SegmentSolution(t_start, t_end, tuple(u), tuple(v), max_iters, max_ratio, worst_mass)


def _probe_terminal(spec: ProblemSpec, slope: float, params: DiscretizationParams) -> GridFunction:
    def ramp(x):
        out = np.zeros((x.shape[0], spec.n))
        out[:, 0] = slope * x
        return out
    return params.sample(ramp)


def estimate_delta0(spec: ProblemSpec, terminal_lipschitz: float, params: DiscretizationParams,
                    t_probe: float = 0.0, probe_nodes: int = PROBE_NODES) -> float:
    """Largest delta = 2^-k / max(1, K^2) whose one-step probes contract by 1/2 or better."""
    if terminal_lipschitz < 0:
        raise ValueError("terminal_lipschitz must be non-negative")
    u_next = _probe_terminal(spec, terminal_lipschitz, params)
    xs = np.linspace(params.x_lo, params.x_hi, probe_nodes + 2)[1:-1]
    z0 = np.zeros((xs.shape[0], spec.n, spec.d))
    delta = 1.0 / max(1.0, spec.K ** 2)
    while delta >= DELTA_FLOOR:
        try:
            ratio = _solve_block(xs, t_probe, delta, u_next, spec, params, z0).ratio
        except (NoContractionError, NonFiniteOutputError) as exc:
            logger.debug("delta=%g probe failed: %s", delta, exc)
            ratio = math.inf
        if ratio <= CONTRACTION_TARGET:
            logger.info("estimated delta0 = %g for %s (probe ratio %.3g)", delta, spec.name, ratio)
            return delta
        delta /= 2.0
    raise NotContractingAtFloorError(
        f"no contraction for {spec.name} down to delta = {DELTA_FLOOR:g}; "
        "check the Lipschitz assumptions"
    )
