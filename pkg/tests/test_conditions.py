from __future__ import annotations

import math
from dataclasses import replace

import numpy as np
import pytest

from fbsde_lab.conditions import (SamplePlan, check_key_condition, check_key_condition_at,
                                  check_one_dimensional, check_sufficient_1, check_sufficient_2,
                                  check_sufficient_3, check_sufficient_over_plan, default_margin_constant,
                                  kbar0, lambda3, lambda3_bound, lambda4, lipschitz_schedule,
                                  sufficient_1_key_constant)
from fbsde_lab.core import DerivativePoint
from fbsde_lab.derivatives import derivative_point
from fbsde_lab.errors import DimensionMismatchError
from fbsde_lab.oracles import get_problem

SUITE_SIZE = 1000


def _dp(name: str) -> DerivativePoint:
    spec = get_problem(name).spec
    return derivative_point(spec, 0.0, 0.0, np.zeros(spec.n), np.zeros((spec.n, spec.d)))


# ----------------------------
# Lambda values
# ----------------------------
def test_example24_lambdas():
    dp = _dp("example24")
    assert lambda3(dp, [1.0]) == -1.0
    assert lambda4(dp, [1.0]) == 0.0


@pytest.mark.parametrize("c", [0.1, 1.0, 10.0])
def test_example24_fails_for_every_c(c):
    report = check_key_condition_at(_dp("example24"), c)
    assert not report.passed
    assert report.mode == "exact"
    assert report.worst_margin == pytest.approx(-c)
    assert report.worst_point["direction"] == [1.0]


def test_coupled_s3_passes_with_margin_two():
    spec = get_problem("coupled_s3").spec
    report = check_key_condition(spec, 1.0, SamplePlan.default(spec))
    assert report.passed
    assert report.worst_margin == pytest.approx(2.0)
    assert check_sufficient_3(_dp("coupled_s3"), 1.0)


def test_linear_constant_lambdas():
    dp = _dp("linear_constant")
    assert lambda4(dp, [1.0]) == pytest.approx(-0.8)
    assert lambda3(dp, [1.0]) == pytest.approx(0.27)
    assert lambda3(dp, [-1.0]) == pytest.approx(-0.27)
    assert check_key_condition_at(dp, 1.0).worst_margin == pytest.approx(0.53)


def test_direction_must_be_unit():
    dp = _dp("linear_constant")
    with pytest.raises(ValueError):
        lambda3(dp, [0.5])
    with pytest.raises(DimensionMismatchError):
        lambda4(dp, [1.0, 0.0])


def test_threads_do_not_change_the_report():
    spec = get_problem("decoupled_f_no_z").spec
    plan = SamplePlan.default(spec, points=6, seed=4)
    single = check_key_condition(spec, 1.0, plan)
    pooled = check_key_condition(spec, 1.0, plan, threads=3)
    assert single.to_dict() == pooled.to_dict()


def test_key_condition_argument_checks():
    spec = get_problem("coupled_s3").spec
    plan = SamplePlan.default(spec)
    with pytest.raises(ValueError):
        check_key_condition(spec, 0.0, plan)
    with pytest.raises(ValueError):
        check_key_condition(spec, 1.0, plan, epsilon=-1.0)
    with pytest.raises(ValueError):
        SamplePlan(plan.state_points, sphere_samples=1)


def test_default_margin_constant_is_inverse_k():
    assert default_margin_constant(get_problem("linear_constant").spec) == pytest.approx(1 / 1.2)


# ----------------------------
# Randomized derivative points
# ----------------------------
def _random_rotation(rng, d: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(d, d)))
    return q * np.sign(np.diag(r))


def _sufficient_1_point(rng, c: float) -> DerivativePoint:
    """n = 2, d = 3; dy_sigma = -k dz_b^T with k large enough for the first condition."""
    n, d = 2, 3
    U = _random_rotation(rng, n)
    V = _random_rotation(rng, d)[:, :n]
    s = rng.uniform(0.5, 2.0, size=n)
    B = U @ np.diag(s) @ V.T
    k = 0.5 * ((np.sum(B * B) + c) / s.min() ** 2 - 1.0) + rng.uniform(0.05, 1.0)
    return DerivativePoint(dz_b=B, dy_b=rng.normal(size=n), dx_sigma=rng.normal(size=d),
                           dy_sigma=-k * B.T, dz_f=rng.normal(size=(n, n, d)))


def _sufficient_2_point(rng) -> DerivativePoint:
    """dz_b = 0, dy_b = 0; dy_sigma columns and dz_f rows in orthogonal subspaces of R^d."""
    n, d = 2, 3
    R = _random_rotation(rng, d)
    P0 = np.zeros((d, n))
    P0[0] = rng.normal(size=n)
    F0 = rng.normal(size=(n, n, d))
    F0[:, :, 0] = 0.0
    return DerivativePoint(dz_b=np.zeros((n, d)), dy_b=np.zeros(n), dx_sigma=rng.normal(size=d),
                           dy_sigma=R @ P0, dz_f=F0 @ R.T)


def _sufficient_3_point(rng, c: float) -> DerivativePoint:
    """n = 1, d = 3 with -dz_b.dy_sigma >= c |dy_b + dz_f.dy_sigma + dz_b.dx_sigma|."""
    d = 3
    b, p, s, f = (rng.normal(size=d) for _ in range(4))
    if b @ p > 0:
        p = -p
    room = -(b @ p) / c
    dy_b = rng.uniform(-0.99, 0.99) * room - f @ p - b @ s
    return DerivativePoint(dz_b=b[None, :], dy_b=[dy_b], dx_sigma=s, dy_sigma=p[:, None],
                           dz_f=f[None, None, :])


def test_first_sufficient_condition_implies_key():
    rng = np.random.default_rng(2024)
    c = 1.0
    for k in range(SUITE_SIZE):
        dp = _sufficient_1_point(rng, c)
        assert check_sufficient_1(dp, c)
        report = check_key_condition_at(dp, sufficient_1_key_constant(dp, c), refine_iters=20, seed=k)
        assert report.passed, (k, report.worst_margin)


def test_second_sufficient_condition_implies_key():
    rng = np.random.default_rng(2025)
    c = 1.0
    for k in range(SUITE_SIZE):
        dp = _sufficient_2_point(rng)
        assert check_sufficient_2(dp)
        report = check_key_condition_at(dp, c, refine_iters=20, seed=k)
        assert report.passed, (k, report.worst_margin)


def test_third_sufficient_condition_implies_key():
    rng = np.random.default_rng(2026)
    c = 1.0
    for k in range(SUITE_SIZE):
        dp = _sufficient_3_point(rng, c)
        assert check_sufficient_3(dp, c)
        report = check_key_condition_at(dp, c, seed=k)
        assert report.passed, (k, report.worst_margin)


def test_lambda3_bound_dominates():
    rng = np.random.default_rng(5)
    for _ in range(200):
        n, d = 3, 2
        dp = DerivativePoint(rng.normal(size=(n, d)), rng.normal(size=n), rng.normal(size=d),
                             rng.normal(size=(d, n)), rng.normal(size=(n, n, d)))
        y = rng.normal(size=n)
        y /= np.linalg.norm(y)
        assert abs(lambda3(dp, y)) <= lambda3_bound(dp) + 1e-12


def test_third_condition_needs_scalar_y():
    with pytest.raises(DimensionMismatchError):
        check_sufficient_3(_dp("decoupled_f_no_z"), 1.0)


def test_one_dimensional_condition():
    assert check_one_dimensional(_dp("brownian_identity"))
    assert not check_one_dimensional(_dp("coupled_s3"))
    assert not check_one_dimensional(_dp("example24"))


def test_sufficient_over_plan_reports_first_failure():
    spec = get_problem("example24").spec
    plan = SamplePlan.default(spec, points=4)
    report = check_sufficient_over_plan(spec, "sufficient_2", 1.0, plan)
    assert report.applicable and not report.passed
    assert report.points_evaluated == 1
    assert report.failing_point["t"] == 0.0

    na = check_sufficient_over_plan(get_problem("decoupled_f_no_z").spec, "sufficient_3", 1.0,
                                    SamplePlan.default(get_problem("decoupled_f_no_z").spec))
    assert not na.applicable and na.points_evaluated == 0


# ----------------------------
# Lipschitz propagation
# ----------------------------
def test_kbar0_values():
    assert kbar0(1.0, 0.0, 1.0) == pytest.approx(1.0)
    assert kbar0(0.0, math.log(2.0), 1.0) == pytest.approx(1.0)
    assert kbar0(1.0, 1.0, 1.0) == pytest.approx(math.sqrt(2 * math.e - 1))
    with pytest.raises(ValueError):
        kbar0(-1.0, 0.0, 1.0)


def test_schedule_runs_from_k0_to_kbar0():
    sched = lipschitz_schedule(2.0, 0.7, 1.5, 3)
    assert len(sched) == 4
    assert sched[0] == pytest.approx(4.0)
    assert sched[-1] == pytest.approx(kbar0(2.0, 0.7, 1.5) ** 2, abs=1e-12)
    assert all(a <= b for a, b in zip(sched, sched[1:]))
    with pytest.raises(ValueError):
        lipschitz_schedule(1.0, 1.0, 1.0, 0)


# ----------------------------
# Sufficient conditions on hand-built points
# ----------------------------
def test_first_sufficient_condition_examples():
    scalar = DerivativePoint(dz_b=[[1.0]], dy_b=[0.0], dx_sigma=[0.0], dy_sigma=[[-1.0]], dz_f=[[[0.0]]])
    assert check_sufficient_1(scalar, 0.5)                 # S = 3 >= 1 + 0.5
    assert not check_sufficient_1(DerivativePoint.zeros(1, 1), 0.1)

    rng = np.random.default_rng(3)
    for _ in range(20):
        dp = replace(DerivativePoint.zeros(2, 1), dz_b=rng.normal(size=(2, 1)))
        assert not check_sufficient_1(dp, 0.1)             # rank 1 < n = 2


def test_second_sufficient_condition_examples():
    rng = np.random.default_rng(4)
    zero = DerivativePoint.zeros(2, 3)
    assert check_sufficient_2(replace(zero, dz_f=rng.normal(size=(2, 2, 3))))
    assert check_sufficient_2(replace(zero, dy_sigma=rng.normal(size=(3, 2))))
    assert not check_sufficient_2(replace(zero, dz_b=rng.normal(size=(2, 3))))
