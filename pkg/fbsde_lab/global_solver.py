"""
Global solver
-------------
Arbitrary horizon by pasting small-time solutions: with T_i = i T / m,

    g_m = g on the grid,
    segment i = backward_sweep(g_i) on [T_{i-1}, T_i],   g_{i-1} = segment i's u[0].

Lip(g_i) is measured at every knot and compared with the propagation
schedule (K_i^2 + 1) = (K0^2 + 1) exp(C_K (T - T_i)). Forward paths are then
assembled with Euler-Maruyama reading Y and Z off the decoupling fields.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .conditions import kbar0, lipschitz_schedule
from .core import (GridFunction, PathBundle, PointMass, ProblemSpec, UniformX0,
                   i0_norm, lipschitz_estimate, sample_rng, theta_norm)
from .errors import LipschitzExplosionError, PathEscapedDomainError
from .settings import get_settings
from .small_time import DiscretizationParams, SegmentSolution, backward_sweep, estimate_delta0

logger = logging.getLogger(__name__)

PATH_CHUNK = 1024
I0_GUARD = 1e-14


# ----------------------------
# Lipschitz fits
# ----------------------------
def _log_excess(measured: np.ndarray, partition: np.ndarray, K0: float):
    T = partition[-1]
    s = T - partition
    y = np.log(measured ** 2 + 1.0) - math.log(K0 * K0 + 1.0)
    usable = (measured > 0) & (s > 0)
    return s[usable], y[usable]


def fit_C_K(measured: np.ndarray, partition: np.ndarray, K0: float) -> float:
    """Least-squares slope through the K0 anchor; clamped at 0."""
    s, y = _log_excess(np.asarray(measured, dtype=float), np.asarray(partition, dtype=float), K0)
    if s.size == 0:
        return 0.0
    return max(float(s @ y / (s @ s)), 0.0)


def envelope_C_K(measured: np.ndarray, partition: np.ndarray, K0: float) -> float:
    """Smallest C_K >= 0 whose schedule dominates every measured Lip(g_i)^2 with T_i < T."""
    s, y = _log_excess(np.asarray(measured, dtype=float), np.asarray(partition, dtype=float), K0)
    if s.size == 0:
        return 0.0
    return max(float(np.max(y / s)), 0.0)


# ----------------------------
# Global solution
# ----------------------------
@dataclass(frozen=True)
class GlobalSolution:
    partition: np.ndarray
    segments: tuple
    g_funcs: tuple
    measured_lipschitz: np.ndarray
    fitted_C_K: float
    envelope_C_K: float
    K0: float
    params: DiscretizationParams

    @property
    def m(self) -> int:
        return len(self.segments)

    @property
    def T(self) -> float:
        return float(self.partition[-1])

    def segment(self, i: int) -> SegmentSolution:
        """Segment on [T_{i-1}, T_i], i = 1..m."""
        return self.segments[i - 1]

    def schedule_bounds(self, C_K: float) -> np.ndarray:
        """Scheduled bound on Lip(g_i)^2, indexed by i = 0..m."""
        return np.array(lipschitz_schedule(self.K0, C_K, self.T, self.m)[::-1])

    def conforms(self, C_K: float, tol: float = 1e-8) -> bool:
        return bool(np.all(self.measured_lipschitz ** 2 <= self.schedule_bounds(C_K) + tol))

    def lipschitz_table(self, C_K: float) -> list[dict]:
        config = self.schedule_bounds(C_K)
        fitted = self.schedule_bounds(self.fitted_C_K)
        return [
            {
                "i": i,
                "T_i": float(self.partition[i]),
                "measured_lip_sq": float(self.measured_lipschitz[i] ** 2),
                "bound_config": float(config[i]),
                "bound_fitted": float(fitted[i]),
            }
            for i in range(self.m + 1)
        ]

    def to_dict(self) -> dict:
        return {
            "T": self.T,
            "m": self.m,
            "partition": [float(t) for t in self.partition],
            "params": self.params.to_dict(),
            "segments": [
                {
                    "index": i,
                    "t_start": float(seg.t_start),
                    "t_end": float(seg.t_end),
                    "J": seg.steps,
                    "inner_iterations_max_used": seg.inner_iterations_max_used,
                    "max_contraction_ratio": float(seg.max_contraction_ratio),
                    "file": f"segment_{i}.json",
                }
                for i, seg in enumerate(self.segments, start=1)
            ],
            "measured_lipschitz": [float(v) for v in self.measured_lipschitz],
            # bounds on Lip(g_i)^2 at the envelope C_K
            "schedule": [
                {
                    "i": i,
                    "T_i": float(self.partition[i]),
                    "measured_lip_sq": float(self.measured_lipschitz[i] ** 2),
                    "schedule_bound": float(bound),
                }
                for i, bound in enumerate(self.schedule_bounds(self.envelope_C_K))
            ],
            "conforms_envelope": self.conforms(self.envelope_C_K),
            "fitted_C_K": float(self.fitted_C_K),
            "envelope_C_K": float(self.envelope_C_K),
            "g_0": self.g_funcs[0].to_dict(),
        }


def _check_support(spec: ProblemSpec, params: DiscretizationParams) -> None:
    x0 = spec.x0
    if isinstance(x0, PointMass):
        inside = params.x_lo <= x0.value <= params.x_hi
    elif isinstance(x0, UniformX0):
        inside = params.x_lo <= x0.low and x0.high <= params.x_hi
    else:
        inside = params.x_lo <= x0.mean_value <= params.x_hi
        if inside and (x0.mean_value - 4 * x0.std < params.x_lo or x0.mean_value + 4 * x0.std > params.x_hi):
            logger.warning("grid [%g, %g] clips the 4-sigma range of X0", params.x_lo, params.x_hi)
    if not inside:
        raise ValueError(f"grid [{params.x_lo}, {params.x_hi}] does not cover the support of X0")


def resolve_partition(spec: ProblemSpec, m, params: DiscretizationParams, c_k: float) -> int:
    if m == "auto":
        delta = estimate_delta0(spec, kbar0(spec.K0, c_k, spec.T), params)
        m = max(1, math.ceil(spec.T / delta - 1e-12))
        logger.info("partition m = %d from delta0 = %g", m, delta)
        return m
    if isinstance(m, bool) or int(m) != m or int(m) < 1:
        raise ValueError(f"partition count must be a positive integer or 'auto', got {m!r}")
    return int(m)


def solve(spec: ProblemSpec, m, params: DiscretizationParams, threads: int = 1,
          c_k: float | None = None, lipschitz_cap: float | None = None) -> GlobalSolution:
    settings = get_settings()
    c_k = settings.c_k if c_k is None else c_k
    cap = settings.lipschitz_cap if lipschitz_cap is None else lipschitz_cap
    _check_support(spec, params)
    m = resolve_partition(spec, m, params, c_k)

    partition = np.array([i * spec.T / m for i in range(m + 1)])
    g: list = [None] * (m + 1)
    segments: list = [None] * m
    measured = np.zeros(m + 1)

    g[m] = params.sample(spec.terminal)
    measured[m] = lipschitz_estimate(g[m])
    for i in range(m, 0, -1):
        seg = backward_sweep(g[i], partition[i - 1], partition[i], spec, params,
                             threads=threads, segment=i)
        segments[i - 1] = seg
        g[i - 1] = seg.u[0]
        measured[i - 1] = lipschitz_estimate(g[i - 1])
        logger.info("segment %d/%d [%.4g, %.4g]: Lip(g_%d) = %.6g", m - i + 1, m,
                    partition[i - 1], partition[i], i - 1, measured[i - 1])
        if measured[i - 1] > cap:
            raise LipschitzExplosionError(
                f"Lip(g_{i - 1}) = {measured[i - 1]:.3g} exceeds the cap {cap:.3g}"
            )

    fitted = fit_C_K(measured, partition, spec.K0)
    envelope = envelope_C_K(measured, partition, spec.K0)
    sol = GlobalSolution(partition, tuple(segments), tuple(g), measured, fitted, envelope,
                         spec.K0, params)
    if not sol.conforms(c_k):
        logger.warning("measured Lip(g_i)^2 exceeds the schedule with configured C_K = %g "
                       "(fitted %.4g, envelope %.4g)", c_k, fitted, envelope)
    return sol


def initial_value_map(sol: GlobalSolution, x) -> np.ndarray:
    """x -> Y_0 = g_0(x)."""
    return sol.g_funcs[0](x)


@dataclass(frozen=True)
class LipschitzProbe:
    pairs: int
    max_slope: float
    kbar0_fitted: float
    kbar0_config: float
    slack: float

    @property
    def within(self) -> bool:
        return self.max_slope <= self.kbar0_fitted + self.slack

    def to_dict(self) -> dict:
        return {
            "pairs": int(self.pairs),
            "max_slope": float(self.max_slope),
            "kbar0_fitted": float(self.kbar0_fitted),
            "kbar0_config": float(self.kbar0_config),
            "slack": float(self.slack),
            "within": bool(self.within),
        }


def probe_initial_value_map(sol: GlobalSolution, pairs: int, seed: int, c_k: float,
                            slack: float = 0.05) -> LipschitzProbe:
    """Sampled |Y0(x1) - Y0(x0)| / |x1 - x0| over the central half of the grid."""
    if pairs < 1:
        raise ValueError("pairs must be >= 1")
    p = sol.params
    quarter = 0.25 * (p.x_hi - p.x_lo)
    rng = np.random.default_rng(seed)
    x0 = rng.uniform(p.x_lo + quarter, p.x_hi - quarter, pairs)
    x1 = rng.uniform(p.x_lo + quarter, p.x_hi - quarter, pairs)
    gap = np.abs(x1 - x0)
    keep = gap > 1e-12
    diffs = np.linalg.norm(initial_value_map(sol, x1[keep]) - initial_value_map(sol, x0[keep]), axis=1)
    max_slope = float(np.max(diffs / gap[keep], initial=0.0))
    return LipschitzProbe(pairs, max_slope, kbar0(sol.K0, sol.fitted_C_K, sol.T),
                          kbar0(sol.K0, c_k, sol.T), slack)


# ----------------------------
# Forward assembly
# ----------------------------
def _time_grid(sol: GlobalSolution) -> np.ndarray:
    pieces = [seg.times[:-1] for seg in sol.segments]
    pieces.append(np.array([sol.T]))
    return np.concatenate(pieces)


def _fields(sol: GlobalSolution) -> list[tuple[GridFunction, GridFunction | None]]:
    """(u, v) at every global time node; v is None at T."""
    out = []
    for seg in sol.segments:
        for j in range(seg.steps):
            out.append((seg.u[j], seg.v[j]))
    out.append((sol.g_funcs[-1], None))
    return out


def _simulate_chunk(indices: np.ndarray, sol: GlobalSolution, spec: ProblemSpec, seed: int,
                    times: np.ndarray, fields: list):
    n, d = spec.n, spec.d
    C, L = indices.shape[0], times.shape[0]
    steps = L - 1
    x0 = np.empty(C)
    noise = np.empty((C, steps, d))
    for row, p in enumerate(indices):
        rng = sample_rng(seed, int(p))
        x0[row] = spec.x0.draw(rng)
        noise[row] = rng.standard_normal((steps, d))

    X = np.empty((C, L))
    Y = np.empty((C, L, n))
    Z = np.zeros((C, L, n, d))
    X[:, 0] = x0
    for k in range(steps):
        u, v = fields[k]
        t, dt = times[k], times[k + 1] - times[k]
        Y[:, k] = u(X[:, k])
        Z[:, k] = v(X[:, k]).reshape(C, n, d)
        drift = spec.drift(t, X[:, k], Y[:, k], Z[:, k])
        sig = spec.diffusion(t, X[:, k], Y[:, k])
        X[:, k + 1] = X[:, k] + drift * dt + np.sum(sig * noise[:, k], axis=1) * math.sqrt(dt)
    Y[:, -1] = fields[-1][0](X[:, -1])
    return X, Y, Z


def forward_assemble(sol: GlobalSolution, spec: ProblemSpec, M: int, seed: int,
                     threads: int = 1, escape_factor: float | None = None,
                     escape_tolerance: float | None = None) -> PathBundle:
    if M < 1:
        raise ValueError("M must be >= 1")
    settings = get_settings()
    factor = settings.escape_factor if escape_factor is None else escape_factor
    tolerance = settings.escape_tolerance if escape_tolerance is None else escape_tolerance

    times = _time_grid(sol)
    fields = _fields(sol)
    chunks = [np.arange(s, min(s + PATH_CHUNK, M)) for s in range(0, M, PATH_CHUNK)]

    def run(idx):
        return _simulate_chunk(idx, sol, spec, seed, times, fields)

    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(c) for c in chunks]
    X = np.concatenate([p[0] for p in parts])
    Y = np.concatenate([p[1] for p in parts])
    Z = np.concatenate([p[2] for p in parts])

    p = sol.params
    width = p.x_hi - p.x_lo
    lo, hi = p.x_lo - factor * width, p.x_hi + factor * width
    escaped = int(np.sum(np.any((X < lo) | (X > hi), axis=1)))
    if escaped > tolerance * M:
        raise PathEscapedDomainError(
            f"{escaped}/{M} paths left [{lo:g}, {hi:g}] (allowed fraction {tolerance:g})"
        )
    if escaped:
        logger.warning("%d/%d paths left the extended domain [%g, %g]", escaped, M, lo, hi)
    return PathBundle(times, X, Y, Z, seed=seed)


# ----------------------------
# Certificates and soft checks
# ----------------------------
@dataclass(frozen=True)
class CertificateReport:
    theta_sq: float
    i0_sq: float
    ratio: float | None
    paths: int
    seed: int

    def to_dict(self) -> dict:
        return {
            "theta_sq": float(self.theta_sq),
            "i0_sq": float(self.i0_sq),
            "ratio": None if self.ratio is None else float(self.ratio),
            "paths": int(self.paths),
            "seed": int(self.seed),
        }


def wellposedness_certificate(spec: ProblemSpec, sol: GlobalSolution, mc: int, seed: int,
                              threads: int = 1, bundle: PathBundle | None = None) -> CertificateReport:
    """Empirical ||Theta||^2 / I0^2; a measurement, nothing is flagged."""
    if bundle is None:
        bundle = forward_assemble(sol, spec, mc, seed, threads=threads)
    theta_sq = theta_norm(bundle)
    i0_sq = i0_norm(spec, mc_samples=mc, seed=seed)
    ratio = theta_sq / i0_sq if i0_sq >= I0_GUARD else None
    if ratio is None:
        logger.warning("I0^2 = %.3g below %.0e: ratio not defined", i0_sq, I0_GUARD)
    return CertificateReport(theta_sq, i0_sq, ratio, bundle.paths, seed)


def decoupling_ratio_positive(bundle: PathBundle) -> float:
    """Fraction of (path, time) samples with Y_1 X > 0."""
    return float(np.mean(bundle.Y[:, :, 0] * bundle.X > 0))
