from __future__ import annotations

import numpy as np
import pytest

from fbsde_lab.core import CoefficientSet, DerivativePoint, DerivativeSet, Dimensions, PointMass, ProblemSpec
from fbsde_lab.experiments import ExperimentConfig
from fbsde_lab.small_time import DiscretizationParams


def make_spec(b=None, sigma=None, f=None, g=None, n=1, d=1, T=1.0, x0=0.0, K=1.0, K0=1.0,
              name="custom", analytic=None) -> ProblemSpec:
    """ProblemSpec with zero coefficients wherever none is given."""
    coeffs = CoefficientSet(
        b=b or (lambda t, x, y, z: np.zeros(x.shape[0])),
        sigma=sigma or (lambda t, x, y: np.zeros((x.shape[0], d))),
        f=f or (lambda t, x, y, z: np.zeros((x.shape[0], n))),
        g=g or (lambda x: np.zeros((x.shape[0], n))),
    )
    derivs = DerivativeSet(analytic=analytic) if analytic is not None else DerivativeSet()
    return ProblemSpec(Dimensions(n, d), coeffs, T, PointMass(x0), K, K0, derivs, name=name)


def make_config(problem: str, params: dict | None = None, disc: dict | None = None,
                **sections) -> ExperimentConfig:
    payload = {
        "problem": {"name": problem, "params": params or {}},
        "discretization": disc or {"steps": 4, "x_lo": -2.0, "x_hi": 2.0, "dx": 0.05},
    }
    payload.update(sections)
    return ExperimentConfig.from_dict(payload)


@pytest.fixture
def zero_spec():
    return make_spec(g=lambda x: np.sin(x)[:, None], name="zero",
                     analytic=lambda t, x, y, z: DerivativePoint.zeros(1, 1))


@pytest.fixture
def brownian_spec():
    return make_spec(sigma=lambda t, x, y: np.ones((x.shape[0], 1)), g=lambda x: x[:, None].copy(),
                     name="brownian")


@pytest.fixture
def wide_params():
    return DiscretizationParams(steps=4, x_lo=-4.0, x_hi=4.0, dx=0.05)
