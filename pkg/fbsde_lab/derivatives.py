"""Derivative blocks at a point: analytic when provided, else central differences.

Step for argument a: h = fd_step * max(1, |a|).
"""

from __future__ import annotations

import numpy as np

from .core import DerivativePoint, ProblemSpec


def _central(values: np.ndarray, steps: np.ndarray) -> np.ndarray:
    """values holds [plus_0, minus_0, plus_1, minus_1, ...] along axis 0."""
    return (values[0::2] - values[1::2]) / (2.0 * steps.reshape((-1,) + (1,) * (values.ndim - 1)))


def finite_difference_point(spec: ProblemSpec, t: float, x: float, y: np.ndarray,
                            z: np.ndarray) -> DerivativePoint:
    n, d = spec.n, spec.d
    fd = spec.derivs.fd_step
    x = float(x)
    y = np.asarray(y, dtype=float).reshape(n)
    z = np.asarray(z, dtype=float).reshape(n, d)

    # z-perturbations: feed b and f together
    hz = fd * np.maximum(1.0, np.abs(z.reshape(-1)))
    zs = np.repeat(z[None], 2 * n * d, axis=0)
    for k in range(n * d):
        i, j = divmod(k, d)
        zs[2 * k, i, j] += hz[k]
        zs[2 * k + 1, i, j] -= hz[k]
    xs = np.full(2 * n * d, x)
    ys = np.repeat(y[None], 2 * n * d, axis=0)
    dz_b = _central(spec.drift(t, xs, ys, zs), hz).reshape(n, d)
    # dz_f[i][k, j] = d f_i / d z_kj
    dz_f = _central(spec.driver(t, xs, ys, zs), hz).reshape(n, d, n).transpose(2, 0, 1)

    # y-perturbations: b and sigma
    hy = fd * np.maximum(1.0, np.abs(y))
    ys = np.repeat(y[None], 2 * n, axis=0)
    for i in range(n):
        ys[2 * i, i] += hy[i]
        ys[2 * i + 1, i] -= hy[i]
    xs = np.full(2 * n, x)
    zs = np.repeat(z[None], 2 * n, axis=0)
    dy_b = _central(spec.drift(t, xs, ys, zs), hy)
    dy_sigma = _central(spec.diffusion(t, xs, ys), hy).T

    # x-perturbation: sigma
    hx = np.array([fd * max(1.0, abs(x))])
    xs = np.array([x + hx[0], x - hx[0]])
    ys = np.repeat(y[None], 2, axis=0)
    dx_sigma = _central(spec.diffusion(t, xs, ys), hx)[0]

    return DerivativePoint(dz_b=dz_b, dy_b=dy_b, dx_sigma=dx_sigma, dy_sigma=dy_sigma, dz_f=dz_f)


def derivative_point(spec: ProblemSpec, t: float, x: float, y, z) -> DerivativePoint:
    if spec.derivs.analytic is not None:
        dp = spec.derivs.analytic(t, x, np.asarray(y, dtype=float), np.asarray(z, dtype=float))
    else:
        dp = finite_difference_point(spec, t, x, y, z)
    return dp
