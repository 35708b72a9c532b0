"""
FBSDE core types
----------------
Problem specification, grid functions, path bundles and the two norms the
well-posedness estimates are stated in:

    I0^2      = E{ |X0|^2 + |g(0)|^2 + int_0^T |b|^2 + |sigma|^2 + |f|^2 (t,0,0,0) dt }
    ||Theta||^2 = E{ sup_t [|X_t|^2 + |Y_t|^2] + int_0^T |Z_t|^2 dt }

Conventions:
- X is scalar, Y and f, g live in R^n, Z in R^{n x d}, W and sigma in R^d.
- Coefficient maps are vectorized over a batch of N points with a scalar
  time: b(t, x[N], y[N,n], z[N,n,d]) -> [N], sigma(t, x, y) -> [N,d],
  f(t, x, y, z) -> [N,n], g(x[N]) -> [N,n].
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence, Union

import numpy as np
import pandas as pd
from scipy.integrate import trapezoid

from .errors import DimensionMismatchError, NonFiniteOutputError
from .settings import get_settings

logger = logging.getLogger(__name__)

DriftMap = Callable[[float, np.ndarray, np.ndarray, np.ndarray], np.ndarray]
DiffusionMap = Callable[[float, np.ndarray, np.ndarray], np.ndarray]
TerminalMap = Callable[[np.ndarray], np.ndarray]

GRID_TOLERANCE = 1e-9
_NODE_SNAP = 1e-10


def sample_rng(seed: int, index: int) -> np.random.Generator:
    """RNG stream for sample ``index``; independent of how samples are batched."""
    return np.random.default_rng([int(seed), int(index)])


# ----------------------------
# Dimensions and coefficients
# ----------------------------
@dataclass(frozen=True)
class Dimensions:
    n: int
    d: int

    def __post_init__(self):
        if int(self.n) < 1 or int(self.d) < 1:
            raise DimensionMismatchError(f"dimensions must be >= 1, got n={self.n}, d={self.d}")


@dataclass(frozen=True)
class CoefficientSet:
    b: DriftMap
    sigma: DiffusionMap
    f: DriftMap
    g: TerminalMap


@dataclass(frozen=True)
class DerivativePoint:
    """The derivative blocks entering Lambda^3 / Lambda^4 at one point.

    Shapes: dz_b (n,d), dy_b (n,), dx_sigma (d,), dy_sigma (d,n), dz_f (n,n,d)
    where dz_f[i] is the (n,d) derivative of the i-th component of f in z.
    """

    dz_b: np.ndarray
    dy_b: np.ndarray
    dx_sigma: np.ndarray
    dy_sigma: np.ndarray
    dz_f: np.ndarray

    def __post_init__(self):
        dz_b = np.atleast_2d(np.array(self.dz_b, dtype=float))
        n, d = dz_b.shape
        blocks = {
            "dz_b": (dz_b, (n, d)),
            "dy_b": (np.array(self.dy_b, dtype=float).reshape(-1), (n,)),
            "dx_sigma": (np.array(self.dx_sigma, dtype=float).reshape(-1), (d,)),
            "dy_sigma": (np.array(self.dy_sigma, dtype=float), (d, n)),
            "dz_f": (np.array(self.dz_f, dtype=float), (n, n, d)),
        }
        for name, (arr, shape) in blocks.items():
            if name == "dy_sigma" and arr.ndim < 2 and arr.size == d * n:
                arr = arr.reshape(d, n)
            if name == "dz_f" and arr.ndim != 3 and arr.size == n * n * d:
                arr = arr.reshape(n, n, d)
            if arr.shape != shape:
                raise DimensionMismatchError(
                    f"derivative block {name} has shape {arr.shape}, expected {shape}"
                )
            if not np.all(np.isfinite(arr)):
                raise NonFiniteOutputError(f"derivative block {name} is not finite")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n(self) -> int:
        return self.dz_b.shape[0]

    @property
    def d(self) -> int:
        return self.dz_b.shape[1]

    @classmethod
    def zeros(cls, n: int, d: int) -> "DerivativePoint":
        return cls(np.zeros((n, d)), np.zeros(n), np.zeros(d), np.zeros((d, n)), np.zeros((n, n, d)))


@dataclass(frozen=True)
class DerivativeSet:
    """Analytic derivative map, or finite differences with step ``fd_step``."""

    analytic: Callable[[float, float, np.ndarray, np.ndarray], DerivativePoint] | None = None
    fd_step: float = 1e-5

    def __post_init__(self):
        if not self.fd_step > 0:
            raise ValueError("fd_step must be positive")


# ----------------------------
# Initial state descriptors
# ----------------------------
@dataclass(frozen=True)
class PointMass:
    value: float

    kind = "point"

    def draw(self, rng: np.random.Generator) -> float:
        return float(self.value)

    @property
    def mean(self) -> float:
        return float(self.value)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "value": float(self.value)}


@dataclass(frozen=True)
class UniformX0:
    low: float
    high: float

    kind = "uniform"

    def __post_init__(self):
        if not self.low < self.high:
            raise ValueError("uniform X0 needs low < high")

    def draw(self, rng: np.random.Generator) -> float:
        return float(rng.uniform(self.low, self.high))

    @property
    def mean(self) -> float:
        return 0.5 * (self.low + self.high)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "low": float(self.low), "high": float(self.high)}


@dataclass(frozen=True)
class GaussianX0:
    mean_value: float
    std: float

    kind = "gaussian"

    def __post_init__(self):
        if not self.std > 0:
            raise ValueError("gaussian X0 needs std > 0")

    def draw(self, rng: np.random.Generator) -> float:
        return float(rng.normal(self.mean_value, self.std))

    @property
    def mean(self) -> float:
        return float(self.mean_value)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "mean": float(self.mean_value), "std": float(self.std)}


InitialState = Union[PointMass, UniformX0, GaussianX0]


def initial_state_from_dict(payload: dict | float) -> InitialState:
    if isinstance(payload, (int, float)):
        return PointMass(float(payload))
    kind = payload.get("kind", "point")
    if kind == "point":
        return PointMass(float(payload["value"]))
    if kind == "uniform":
        return UniformX0(float(payload["low"]), float(payload["high"]))
    if kind == "gaussian":
        return GaussianX0(float(payload["mean"]), float(payload["std"]))
    raise ValueError(f"unknown X0 kind {kind!r}")


def draw_initial_states(x0: InitialState, seed: int, indices: Sequence[int]) -> np.ndarray:
    if isinstance(x0, PointMass):
        return np.full(len(indices), float(x0.value))
    return np.array([x0.draw(sample_rng(seed, i)) for i in indices], dtype=float)


# ----------------------------
# Problem specification
# ----------------------------
@dataclass(frozen=True)
class ProblemSpec:
    dims: Dimensions
    coeffs: CoefficientSet
    T: float
    x0: InitialState
    K: float
    K0: float
    derivs: DerivativeSet = field(default_factory=lambda: DerivativeSet(fd_step=get_settings().fd_step))
    name: str = "custom"

    def __post_init__(self):
        if not self.T > 0:
            raise ValueError(f"horizon T must be positive, got {self.T}")
        if not self.K > 0:
            raise ValueError(f"Lipschitz constant K must be positive, got {self.K}")
        if not self.K0 >= 0:
            raise ValueError(f"Lipschitz constant K0 must be non-negative, got {self.K0}")

    @property
    def n(self) -> int:
        return self.dims.n

    @property
    def d(self) -> int:
        return self.dims.d

    def with_coefficients(self, **changes) -> "ProblemSpec":
        """Copy with some of b, sigma, f, g replaced."""
        coeffs = CoefficientSet(
            b=changes.get("b", self.coeffs.b),
            sigma=changes.get("sigma", self.coeffs.sigma),
            f=changes.get("f", self.coeffs.f),
            g=changes.get("g", self.coeffs.g),
        )
        return ProblemSpec(self.dims, coeffs, self.T, self.x0, self.K, self.K0,
                           DerivativeSet(None, self.derivs.fd_step), name=self.name)

    # checked evaluation, used by the solvers
    def drift(self, t, x, y, z) -> np.ndarray:
        return _checked("b", self.coeffs.b(t, x, y, z), (len(x),))

    def diffusion(self, t, x, y) -> np.ndarray:
        return _checked("sigma", self.coeffs.sigma(t, x, y), (len(x), self.d))

    def driver(self, t, x, y, z) -> np.ndarray:
        return _checked("f", self.coeffs.f(t, x, y, z), (len(x), self.n))

    def terminal(self, x) -> np.ndarray:
        return _checked("g", self.coeffs.g(x), (len(x), self.n))

    def origin(self, batch: int = 1):
        """Zero (x, y, z) batch."""
        return np.zeros(batch), np.zeros((batch, self.n)), np.zeros((batch, self.n, self.d))


def _checked(name: str, out, shape: tuple) -> np.ndarray:
    arr = np.asarray(out, dtype=float)
    if arr.shape != shape:
        raise DimensionMismatchError(f"coefficient {name} returned shape {arr.shape}, expected {shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteOutputError(f"coefficient {name} returned a non-finite value")
    return arr


# ----------------------------
# Grid functions
# ----------------------------
@dataclass(frozen=True)
class GridFunction:
    """Vector-valued function of x on a uniform grid.

    Piecewise-linear inside [x_lo, x_hi]; outside, continued with the
    one-sided boundary slope so the grid Lipschitz constant is preserved.
    """

    x_lo: float
    x_hi: float
    dx: float
    values: np.ndarray
    extension: str = "linear"

    def __post_init__(self):
        if not self.x_lo < self.x_hi:
            raise ValueError("grid needs x_lo < x_hi")
        if not self.dx > 0:
            raise ValueError("grid spacing dx must be positive")
        if self.extension != "linear":
            raise ValueError(f"unsupported extension rule {self.extension!r}")
        count = grid_node_count(self.x_lo, self.x_hi, self.dx)
        values = np.array(self.values, dtype=float)
        if values.ndim == 1:
            values = values.reshape(-1, 1)
        if values.ndim != 2 or values.shape[0] != count:
            raise DimensionMismatchError(f"grid expects {count} nodes, values have shape {values.shape}")
        if count < 2:
            raise ValueError("grid function needs at least 2 nodes")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @classmethod
    def sample(cls, func: Callable[[np.ndarray], np.ndarray], x_lo: float, x_hi: float,
               dx: float) -> "GridFunction":
        nodes = grid_nodes(x_lo, x_hi, dx)
        return cls(x_lo, x_hi, dx, np.asarray(func(nodes), dtype=float))

    @property
    def size(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def nodes(self) -> np.ndarray:
        return grid_nodes(self.x_lo, self.x_hi, self.dx)

    def __call__(self, x) -> np.ndarray:
        xa = np.asarray(x, dtype=float)
        flat = xa.reshape(-1)
        last = self.size - 1
        pos = (flat - self.x_lo) / self.dx
        nearest = np.rint(pos)
        snap = (np.abs(pos - nearest) <= _NODE_SNAP) & (nearest >= 0) & (nearest <= last)
        pos = np.where(snap, nearest, pos)
        k = np.clip(np.floor(pos), 0, last - 1).astype(np.intp)
        w = (pos - k)[:, None]
        out = (1.0 - w) * self.values[k] + w * self.values[k + 1]
        if xa.ndim == 0:
            return out[0]
        return out.reshape(xa.shape + (self.width,))

    def to_dict(self) -> dict:
        return {
            "x_lo": float(self.x_lo),
            "x_hi": float(self.x_hi),
            "dx": float(self.dx),
            "n": int(self.width),
            "values": self.values.tolist(),
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "GridFunction":
        values = np.asarray(payload["values"], dtype=float).reshape(-1, int(payload["n"]))
        return cls(float(payload["x_lo"]), float(payload["x_hi"]), float(payload["dx"]), values)


def grid_node_count(x_lo: float, x_hi: float, dx: float) -> int:
    ratio = (x_hi - x_lo) / dx
    if abs(ratio - round(ratio)) > GRID_TOLERANCE:
        raise ValueError(f"(x_hi - x_lo) / dx = {ratio!r} is not an integer")
    return int(round(ratio)) + 1


def grid_nodes(x_lo: float, x_hi: float, dx: float) -> np.ndarray:
    return x_lo + dx * np.arange(grid_node_count(x_lo, x_hi, dx))


def lipschitz_estimate(gf: GridFunction) -> float:
    """Largest divided difference between adjacent nodes (Euclidean norm)."""
    jumps = np.linalg.norm(np.diff(gf.values, axis=0), axis=1)
    return float(jumps.max() / gf.dx)


# ----------------------------
# Path bundles
# ----------------------------
@dataclass(frozen=True)
class PathBundle:
    """Monte Carlo paths of (X, Y, Z): X (M,L), Y (M,L,n), Z (M,L,n,d)."""

    time_grid: np.ndarray
    X: np.ndarray
    Y: np.ndarray
    Z: np.ndarray
    seed: int = 0

    def __post_init__(self):
        times = np.array(self.time_grid, dtype=float)
        X = np.array(self.X, dtype=float)
        Y = np.array(self.Y, dtype=float)
        Z = np.array(self.Z, dtype=float)
        if X.ndim == 1:
            X = X[None, :]
        if Y.ndim == 2:
            Y = Y[None, :, :]
        if Z.ndim == 3:
            Z = Z[None, :, :, :]
        L = times.shape[0]
        if times.ndim != 1 or L < 1 or np.any(np.diff(times) <= 0):
            raise ValueError("time grid must be a strictly increasing 1-d array")
        M = X.shape[0]
        if M < 1:
            raise ValueError("path bundle needs at least one path")
        if X.shape != (M, L) or Y.shape[:2] != (M, L) or Z.shape[:2] != (M, L) or Z.ndim != 4:
            raise DimensionMismatchError(
                f"path arrays do not share the time grid: X{X.shape} Y{Y.shape} Z{Z.shape}, L={L}"
            )
        for name, arr in (("time_grid", times), ("X", X), ("Y", Y), ("Z", Z)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def paths(self) -> int:
        return self.X.shape[0]

    @property
    def n(self) -> int:
        return self.Y.shape[2]

    @property
    def d(self) -> int:
        return self.Z.shape[3]

    def to_frame(self) -> pd.DataFrame:
        """Long format: t, path_id, X, Y_1..Y_n, Z_11..Z_nd."""
        M, L = self.X.shape
        data = {
            "t": np.tile(self.time_grid, M),
            "path_id": np.repeat(np.arange(M), L),
            "X": self.X.reshape(-1),
        }
        for i in range(self.n):
            data[f"Y_{i + 1}"] = self.Y[:, :, i].reshape(-1)
        for i in range(self.n):
            for j in range(self.d):
                data[f"Z_{i + 1}{j + 1}"] = self.Z[:, :, i, j].reshape(-1)
        return pd.DataFrame(data)


def theta_norm(bundle: PathBundle) -> float:
    """Empirical ||Theta||^2 (discrete sup, left-endpoint Z integral)."""
    sup_part = np.max(bundle.X ** 2 + np.sum(bundle.Y ** 2, axis=2), axis=1)
    dt = np.diff(bundle.time_grid)
    z_sq = np.sum(bundle.Z[:, :-1] ** 2, axis=(2, 3))
    per_path = sup_part + z_sq @ dt
    value = float(np.mean(per_path))
    if not np.isfinite(value):
        raise NonFiniteOutputError("theta norm is not finite")
    return value


# ----------------------------
# Validation and I0
# ----------------------------
@dataclass(frozen=True)
class ValidationReport:
    probe_count: int
    lipschitz: dict
    passed: bool = True

    def to_dict(self) -> dict:
        return {"passed": self.passed, "probe_count": self.probe_count,
                "lipschitz": {k: float(v) for k, v in self.lipschitz.items()}}


def _ratio(delta: np.ndarray, step: float) -> float:
    return float(np.linalg.norm(delta)) / step if step > 0 else 0.0


def validate_problem(spec: ProblemSpec, probe_count: int = 100, seed: int = 0,
                     step: float = 1e-3) -> ValidationReport:
    """Probe every coefficient at pseudo-random points.

    Raises on the first dimension mismatch or non-finite output; otherwise
    reports per-coefficient Lipschitz estimates from one-block perturbations.
    """
    if probe_count < 1:
        raise ValueError("probe_count must be >= 1")
    n, d = spec.n, spec.d
    rng = np.random.default_rng(seed)
    lip = {"b": 0.0, "sigma": 0.0, "f": 0.0, "g": 0.0}
    for _ in range(probe_count):
        t = float(rng.uniform(0.0, spec.T))
        x = rng.normal()
        y = rng.normal(size=n)
        z = rng.normal(size=(n, d))
        dxp = step * rng.choice((-1.0, 1.0))
        dyp = rng.normal(size=n)
        dyp *= step / np.linalg.norm(dyp)
        dzp = rng.normal(size=(n, d))
        dzp *= step / np.linalg.norm(dzp)

        xs = np.array([x, x + dxp, x, x])
        ys = np.stack([y, y, y + dyp, y])
        zs = np.stack([z, z, z, z + dzp])
        b = spec.drift(t, xs, ys, zs)
        f = spec.driver(t, xs, ys, zs)
        sig = spec.diffusion(t, xs[:3], ys[:3])
        g = spec.terminal(np.array([x, x + dxp]))

        steps = (abs(dxp), step, step)
        for name, out in (("b", b), ("f", f)):
            for row, h in zip((1, 2, 3), steps):
                lip[name] = max(lip[name], _ratio(out[row] - out[0], h))
        for row, h in zip((1, 2), steps[:2]):
            lip["sigma"] = max(lip["sigma"], _ratio(sig[row] - sig[0], h))
        lip["g"] = max(lip["g"], _ratio(g[1] - g[0], abs(dxp)))

        if spec.derivs.analytic is not None:
            dp = spec.derivs.analytic(t, x, y, z)
            if dp.n != n or dp.d != d:
                raise DimensionMismatchError(
                    f"analytic derivatives have (n, d) = ({dp.n}, {dp.d}), expected ({n}, {d})"
                )
    logger.debug("validated %s with %d probes: %s", spec.name, probe_count, lip)
    return ValidationReport(probe_count=probe_count, lipschitz=lip)


def i0_norm(spec: ProblemSpec, mc_samples: int = 1000, time_steps: int = 100, seed: int = 0) -> float:
    """Estimate I0^2; trapezoid rule in time, Monte Carlo over X0."""
    if mc_samples < 1 or time_steps < 1:
        raise ValueError("mc_samples and time_steps must be >= 1")
    x0 = draw_initial_states(spec.x0, seed, range(mc_samples))
    x0_part = float(np.mean(x0 ** 2))
    x, y, z = spec.origin()
    g_part = float(np.sum(spec.terminal(x)[0] ** 2))
    times = np.linspace(0.0, spec.T, time_steps + 1)
    integrand = np.empty_like(times)
    for k, t in enumerate(times):
        integrand[k] = (
            spec.drift(t, x, y, z)[0] ** 2
            + np.sum(spec.diffusion(t, x, y)[0] ** 2)
            + np.sum(spec.driver(t, x, y, z)[0] ** 2)
        )
    value = x0_part + g_part + float(trapezoid(integrand, times))
    if not np.isfinite(value):
        raise NonFiniteOutputError("I0 norm is not finite")
    return value
