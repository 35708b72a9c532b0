from __future__ import annotations

import math
from dataclasses import replace

import numpy as np
import pytest

from conftest import make_spec
from fbsde_lab.conditions import kbar0
from fbsde_lab.core import PointMass
from fbsde_lab.errors import LipschitzExplosionError, PathEscapedDomainError
from fbsde_lab.global_solver import (decoupling_ratio_positive, envelope_C_K, fit_C_K, forward_assemble,
                                     initial_value_map, probe_initial_value_map, resolve_partition, solve,
                                     wellposedness_certificate)
from fbsde_lab.oracles import get_problem
from fbsde_lab.small_time import DiscretizationParams, estimate_delta0


@pytest.mark.slow
def test_example24_end_to_end():
    spec = get_problem("example24").spec
    params = DiscretizationParams(steps=16, x_lo=-1.0, x_hi=3.0, dx=0.01)
    sol = solve(spec, 4, params)
    assert sol.m == 4
    assert np.allclose(sol.partition, [0.0, 0.25, 0.5, 0.75, 1.0])
    assert initial_value_map(sol, 1.0)[0] == pytest.approx(0.5, abs=1e-9)

    bundle = forward_assemble(sol, spec, 1, seed=0)
    t = bundle.time_grid
    assert t.shape == (65,)
    assert abs(bundle.Y[0, 0, 0] - 0.5) <= 1e-3
    assert np.max(np.abs(bundle.X[0] - (1.0 - t / 2.0))) <= 1e-3
    # the scheme telescopes exactly on this problem
    assert np.allclose(bundle.Y[0, :, 0], 0.5, atol=1e-9)
    assert np.all(bundle.Z[0, -1] == 0.0)
    assert decoupling_ratio_positive(bundle) == 1.0


def test_zero_spec_solution_is_zero():
    spec = make_spec()
    params = DiscretizationParams(steps=4, x_lo=-1.0, x_hi=1.0, dx=0.1)
    sol = solve(spec, 2, params)
    for g in sol.g_funcs:
        assert np.all(np.abs(g.values) <= 1e-15)
    assert sol.fitted_C_K == 0.0 and sol.envelope_C_K == 0.0

    bundle = forward_assemble(sol, spec, 5, seed=1)
    assert np.all(bundle.X == 0.0)
    cert = wellposedness_certificate(spec, sol, 5, seed=1, bundle=bundle)
    assert cert.i0_sq == 0.0
    assert cert.ratio is None


def test_brownian_identity_two_segments():
    entry = get_problem("brownian_identity", T=2.0)
    spec = entry.spec
    params = DiscretizationParams(steps=10, x_lo=-4.0, x_hi=4.0, dx=0.05)
    sol = solve(spec, 2, params)
    nodes = params.nodes
    assert np.allclose(sol.g_funcs[0].values[:, 0], nodes, atol=1e-8)
    assert np.allclose(sol.segment(1).v[0].values, 1.0, atol=1e-8)
    assert np.allclose(sol.measured_lipschitz, 1.0)
    assert sol.conforms(sol.fitted_C_K)

    bundle = forward_assemble(sol, spec, 400, seed=7)
    assert np.allclose(bundle.Y[:, :, 0], bundle.X, atol=1e-8)
    assert np.allclose(bundle.Z[:, :-1], 1.0, atol=1e-8)
    cert = wellposedness_certificate(spec, sol, 400, seed=7, bundle=bundle)
    assert cert.i0_sq == pytest.approx(2.0)
    assert cert.ratio > 1.0


def test_partition_knots_are_decreasing_solves():
    spec = get_problem("coupled_s3").spec
    params = DiscretizationParams(steps=4, x_lo=-3.0, x_hi=3.0, dx=0.05)
    sol = solve(spec, 3, params)
    for i in range(1, sol.m + 1):
        seg = sol.segment(i)
        assert seg.t_start == pytest.approx(sol.partition[i - 1])
        assert seg.u[-1] is sol.g_funcs[i]
        assert seg.u[0] is sol.g_funcs[i - 1]


def test_fitted_constants_recover_schedule():
    partition = np.linspace(0.0, 1.0, 5)
    K0, C = 1.0, 0.7
    measured = np.sqrt((K0 ** 2 + 1) * np.exp(C * (1.0 - partition)) - 1)
    assert fit_C_K(measured, partition, K0) == pytest.approx(C)
    assert envelope_C_K(measured, partition, K0) == pytest.approx(C)

    noisy = measured * np.array([1.05, 0.97, 1.02, 0.99, 1.0])
    assert envelope_C_K(noisy, partition, K0) >= fit_C_K(noisy, partition, K0)
    assert fit_C_K(np.full(5, 0.5), partition, K0) == 0.0
    assert envelope_C_K(np.zeros(5), partition, K0) == 0.0


def test_lipschitz_cap_raises():
    spec = get_problem("brownian_identity").spec
    params = DiscretizationParams(steps=2, x_lo=-2.0, x_hi=2.0, dx=0.1)
    with pytest.raises(LipschitzExplosionError):
        solve(spec, 1, params, lipschitz_cap=0.5)


def test_escaped_paths_raise():
    spec = get_problem("brownian_identity").spec
    params = DiscretizationParams(steps=2, x_lo=-0.5, x_hi=0.5, dx=0.05)
    sol = solve(spec, 1, params)
    with pytest.raises(PathEscapedDomainError):
        forward_assemble(sol, spec, 200, seed=0, escape_factor=0.0)
    forward_assemble(sol, spec, 200, seed=0, escape_factor=0.0, escape_tolerance=1.0)


def test_support_and_partition_arguments():
    spec = get_problem("example24", x0=5.0).spec
    params = DiscretizationParams(steps=2, x_lo=-1.0, x_hi=3.0, dx=0.1)
    with pytest.raises(ValueError):
        solve(spec, 1, params)
    for bad in (0, 1.5, True, "many"):
        with pytest.raises(ValueError):
            resolve_partition(get_problem("example24").spec, bad, params, 1.0)


def test_auto_partition_from_delta0():
    spec = get_problem("example24").spec
    params = DiscretizationParams(steps=2, x_lo=-1.0, x_hi=3.0, dx=0.05)
    # probe slope kbar0(1, 1, 1) = sqrt(2e - 1) ~ 2.1 contracts first at delta = 1/8
    assert resolve_partition(spec, "auto", params, 1.0) == 8


def test_partition_insensitivity():
    spec = get_problem("coupled_s3").spec
    params = DiscretizationParams(steps=8, x_lo=-3.0, x_hi=3.0, dx=0.05)
    one = solve(spec, 1, params).g_funcs[0]
    two = solve(spec, 2, replace(params, steps=4)).g_funcs[0]
    assert np.max(np.abs(one.values - two.values)) <= 1e-10


@pytest.mark.slow
def test_schedule_conformance():
    params = DiscretizationParams(steps=8, x_lo=-3.0, x_hi=3.0, dx=0.02)
    for entry, m in ((get_problem("brownian_identity"), 2), (get_problem("coupled_s3"), 1)):
        spec = entry.spec
        sol = solve(spec, m, params)
        bounds = sol.schedule_bounds(sol.envelope_C_K)
        assert np.all(sol.measured_lipschitz ** 2 <= bounds + 1e-8)
        assert bounds[0] == pytest.approx(kbar0(spec.K0, sol.envelope_C_K, spec.T) ** 2, abs=1e-12)
        if m == 1:
            assert sol.fitted_C_K == pytest.approx(sol.envelope_C_K)
            assert sol.conforms(sol.fitted_C_K)


@pytest.mark.slow
def test_initial_value_map_probe():
    params = DiscretizationParams(steps=8, x_lo=-3.0, x_hi=3.0, dx=0.02)
    base = get_problem("coupled_s3").spec
    delta = estimate_delta0(base, kbar0(base.K0, 1.0, base.T), params)
    spec = get_problem("coupled_s3", T=min(0.5, delta)).spec
    sol = solve(spec, 1, params)
    probe = probe_initial_value_map(sol, 500, seed=11, c_k=1.0)
    assert probe.pairs == 500
    assert probe.within
    assert probe.max_slope <= probe.kbar0_fitted + 0.05


def test_forward_paths_do_not_depend_on_chunking():
    spec = get_problem("brownian_identity", x0={"kind": "uniform", "low": -1.0, "high": 1.0}).spec
    params = DiscretizationParams(steps=2, x_lo=-4.0, x_hi=4.0, dx=0.1)
    sol = solve(spec, 1, params)
    many = forward_assemble(sol, spec, 1100, seed=5, threads=3)
    few = forward_assemble(sol, spec, 3, seed=5)
    assert np.array_equal(many.X[:3], few.X)
    assert not isinstance(spec.x0, PointMass)
    assert np.all(np.abs(many.X[:, 0]) <= 1.0)
    assert math.isclose(many.time_grid[-1], 1.0)


@pytest.mark.parametrize("x0", [1.0, 2.0])
def test_example24_certificate_ratio(x0):
    spec = get_problem("example24", x0=x0).spec
    params = DiscretizationParams(steps=4, x_lo=-1.0, x_hi=3.0, dx=0.05)
    sol = solve(spec, 2, params)
    cert = wellposedness_certificate(spec, sol, 2, seed=0)
    # sup is reached at t = 0: |X0|^2 + |X0 / 2|^2 against I0^2 = |X0|^2
    assert cert.i0_sq == pytest.approx(x0 ** 2)
    assert cert.ratio == pytest.approx(1.25, abs=1e-8)


def test_solution_dict_carries_schedule_bounds():
    spec = get_problem("brownian_identity", T=2.0).spec
    params = DiscretizationParams(steps=4, x_lo=-4.0, x_hi=4.0, dx=0.1)
    sol = solve(spec, 2, params)
    payload = sol.to_dict()
    rows = payload["schedule"]
    assert [row["i"] for row in rows] == [0, 1, 2]
    bounds = sol.schedule_bounds(sol.envelope_C_K)
    for row, bound in zip(rows, bounds):
        assert row["schedule_bound"] == pytest.approx(bound)
        assert row["measured_lip_sq"] <= row["schedule_bound"] + 1e-8
    assert payload["conforms_envelope"] is True
