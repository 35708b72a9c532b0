from __future__ import annotations

import numpy as np
import pytest

from conftest import make_spec
from fbsde_lab.conditions import SamplePlan, check_key_condition, check_sufficient_over_plan
from fbsde_lab.errors import ConfigInvalidError, NoAnalyticFormError, UnknownProblemError
from fbsde_lab.global_solver import solve
from fbsde_lab.oracles import (PROFILE_C, REGISTRY, analytic_eval, analytic_grid, brute_force_reference,
                               get_problem, list_problems, refine_params, verify_entry)
from fbsde_lab.small_time import DiscretizationParams


def test_unknown_names_and_parameters():
    with pytest.raises(UnknownProblemError) as info:
        get_problem("example25")
    assert "example24" in str(info.value)
    with pytest.raises(ConfigInvalidError):
        get_problem("example24", kappa=1.0)


def test_overrides_do_not_touch_the_registry():
    entry = get_problem("coupled_s3", T=0.25)
    assert entry.spec.T == 0.25
    assert REGISTRY["coupled_s3"].spec.T == 0.5


def test_registry_listing():
    listing = list_problems()
    assert [item["name"] for item in listing] == sorted(REGISTRY)
    by_name = {item["name"]: item for item in listing}
    assert by_name["example24"]["has_analytic"] is True
    assert by_name["coupled_s3"]["has_analytic"] is False
    assert by_name["decoupled_f_no_z"]["condition_profile"]["sufficient_3"] is None


@pytest.mark.parametrize("name", sorted(REGISTRY))
def test_condition_profiles_are_reproduced(name):
    entry = REGISTRY[name]
    spec = entry.spec
    plan = SamplePlan.default(spec, points=8, seed=1)
    profile = entry.condition_profile
    assert profile["c"] == PROFILE_C
    assert check_key_condition(spec, PROFILE_C, plan).passed == profile["key"]
    for cond in ("sufficient_1", "sufficient_2", "sufficient_3"):
        report = check_sufficient_over_plan(spec, cond, PROFILE_C, plan)
        observed = report.passed if report.applicable else None
        assert observed == profile[cond], cond


def test_analytic_values():
    u, v = analytic_eval(get_problem("example24"), 0.0, 1.0)
    assert u[0] == pytest.approx(0.5) and v[0, 0] == 0.0

    u, v = analytic_eval(get_problem("brownian_square", sigma=2.0), 0.5, 1.5)
    assert u[0] == pytest.approx(1.5 ** 2 + 4.0 * 0.5)
    assert v[0, 0] == pytest.approx(6.0)

    with pytest.raises(NoAnalyticFormError):
        analytic_eval(get_problem("coupled_s3"), 0.0, 0.0)


def test_linear_constant_field_hits_terminal():
    entry = get_problem("linear_constant")
    u, v = analytic_eval(entry, 1.0, 2.0)
    assert u[0] == pytest.approx(2.0, abs=1e-12)
    # v = p (alpha2 x + beta2 u + sigma0) with p(T) = G = 1
    assert v[0, 0] == pytest.approx(0.3 * 2.0 - 0.8 * 2.0, abs=1e-12)

    u0, _ = analytic_eval(entry, 0.0, 0.0)
    u1, _ = analytic_eval(entry, 0.0, 1.0)
    assert u1[0] - u0[0] < 1.0          # p(0) < p(T) = G
    assert u0[0] == pytest.approx(0.0, abs=1e-12)   # q stays 0 when sigma0 = 0


def test_analytic_grid_layout():
    params = DiscretizationParams(steps=1, x_lo=-1.0, x_hi=1.0, dx=0.5)
    grid = analytic_grid(get_problem("example24"), 1.0, params)
    assert np.allclose(grid.values[:, 0], params.nodes)


def test_one_step_residuals():
    params = DiscretizationParams(steps=1, x_lo=-4.0, x_hi=6.0, dx=0.01)
    err_y, err_z = verify_entry(get_problem("brownian_identity"), params, 0.2, 0.5, 0.01)
    assert err_y <= 1e-12 and err_z <= 1e-12

    err_y, err_z = verify_entry(get_problem("example24"), params, 0.2, 0.5, 0.05)
    assert err_y <= 1e-10 and err_z <= 1e-12

    # interpolation of x^2 is off by at most dx^2 / 4 per node
    err_y, err_z = verify_entry(get_problem("brownian_square"), params, 0.2, 0.5, 0.01)
    assert err_y <= params.dx ** 2
    assert err_z <= 1e-3


def test_linear_residual_is_second_order_in_dt():
    entry = get_problem("linear_constant")
    params = DiscretizationParams(steps=1, x_lo=-4.0, x_hi=6.0, dx=0.05)
    coarse, _ = verify_entry(entry, params, 0.3, 1.0, 0.02)
    fine, _ = verify_entry(entry, params, 0.3, 1.0, 0.01)
    assert coarse < 1e-3
    assert fine < coarse / 3.0


def test_refine_params():
    params = DiscretizationParams(steps=4, x_lo=-1.0, x_hi=1.0, dx=0.1)
    fine = refine_params(params)
    assert fine.steps == 16 and fine.dx == pytest.approx(0.025)


def test_brute_force_reference_sanity():
    params = DiscretizationParams(steps=8, x_lo=-4.0, x_hi=4.0, dx=0.05)
    ref = brute_force_reference(get_problem("brownian_identity").spec, params)
    assert np.max(np.abs(ref.values[:, 0] - params.nodes)) <= 1e-8

    zero = make_spec(g=lambda x: np.sin(x)[:, None])
    ref = brute_force_reference(zero, params)
    assert np.allclose(ref.values[:, 0], np.sin(params.nodes), atol=1e-14)


@pytest.mark.slow
def test_coupled_s3_coarse_error_shrinks_against_reference():
    spec = get_problem("coupled_s3").spec
    coarse = DiscretizationParams(steps=4, x_lo=-3.0, x_hi=3.0, dx=0.04)
    ref = brute_force_reference(spec, refine_params(coarse.refined(2), 4))
    interior = coarse.nodes[np.abs(coarse.nodes) <= 1.5]
    errors = []
    for level in range(2):
        g0 = solve(spec, 1, coarse.refined(2 ** level)).g_funcs[0]
        errors.append(np.max(np.abs(g0(interior) - ref(interior))))
    assert errors[1] < errors[0]
