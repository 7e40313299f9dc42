import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from frbattery.lp import LpProblem, LpStatus, NumericalFailure, solve_lp
from oracles import random_lp, vertex_enumeration


def test_textbook_lp():
    # max 3x + 5y  s.t. x <= 4, 2y <= 12, 3x + 2y <= 18
    p = LpProblem([3, 5], A_ub=[[1, 0], [0, 2], [3, 2]], b_ub=[4, 12, 18])
    s = solve_lp(p)
    assert s.optimal
    np.testing.assert_allclose(s.z_star, [2, 6], atol=1e-12)
    assert s.obj == pytest.approx(36)


def test_vertex_oracle_agreement_many():
    rng = np.random.default_rng(2024)
    for _ in range(60):
        p = random_lp(rng)
        ref = vertex_enumeration(p)
        s = solve_lp(p)
        if ref is None:
            assert s.status == LpStatus.INFEASIBLE
        else:
            assert s.optimal
            assert s.obj == pytest.approx(ref, abs=1e-8, rel=1e-10)
            assert p.max_violation(s.z_star) <= 1e-8


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_optimum_dominates_random_feasible_points(seed):
    rng = np.random.default_rng(seed)
    p = random_lp(rng, infeasible_prob=0.0)
    s = solve_lp(p)
    assert s.optimal
    assert p.max_violation(s.z_star) <= 1e-8
    # convex combinations of the optimum with a known feasible vertex stay feasible
    # and never improve on it
    ref = vertex_enumeration(p)
    assert s.obj >= ref - 1e-8


def test_infeasible_detected():
    p = LpProblem([1, 1], A_ub=[[1, 1]], b_ub=[-1], lb=[0, 0], ub=[1, 1])
    assert solve_lp(p).status == LpStatus.INFEASIBLE
    p = LpProblem([1], A_eq=[[1]], b_eq=[5], lb=[0], ub=[1])
    assert solve_lp(p).status == LpStatus.INFEASIBLE


def test_unbounded_detected():
    p = LpProblem([1, 0], A_ub=[[-1, 1]], b_ub=[1])
    assert solve_lp(p).status == LpStatus.UNBOUNDED


def test_free_and_fixed_variables():
    # x free, y fixed at 2: max x s.t. x + y <= 5
    p = LpProblem([1, 0], A_ub=[[1, 1]], b_ub=[5], lb=[-np.inf, 2], ub=[np.inf, 2])
    s = solve_lp(p)
    np.testing.assert_allclose(s.z_star, [3, 2], atol=1e-12)


def test_box_only_problem():
    p = LpProblem([1, -2, 0], lb=[-1, -1, -1], ub=[2, 3, 4])
    s = solve_lp(p)
    np.testing.assert_allclose(s.z_star[:2], [2, -1])
    assert s.obj == pytest.approx(4)
    assert solve_lp(LpProblem([1], lb=[0], ub=[np.inf])).status == LpStatus.UNBOUNDED


def test_degenerate_cycling_example():
    # Beale's example, which cycles under textbook Dantzig pricing
    c = np.array([0.75, -150, 0.02, -6])
    A = np.array([[0.25, -60, -0.04, 9], [0.5, -90, -0.02, 3], [0, 0, 1, 0]])
    p = LpProblem(c, A_ub=A, b_ub=[0, 0, 1])
    s = solve_lp(p)
    assert s.optimal
    assert s.obj == pytest.approx(0.05)


def test_deterministic_repeat():
    rng = np.random.default_rng(5)
    p = random_lp(rng, infeasible_prob=0)
    a, b = solve_lp(p), solve_lp(p)
    assert a.iterations == b.iterations
    assert np.array_equal(a.z_star, b.z_star)


def test_sparse_chain_uses_crash_basis():
    # a long chain of equalities is solved in a handful of pivots thanks to the crash
    n = 400
    A = sp.diags([np.ones(n), -np.ones(n - 1)], [0, 1], shape=(n - 1, n)).tocsr()
    c = np.zeros(n)
    c[-1] = 1.0
    lb = np.zeros(n)
    ub = np.full(n, 10.0)
    lb[0] = ub[0] = 3.0
    s = solve_lp(LpProblem(c, A_eq=A, b_eq=np.zeros(n - 1), lb=lb, ub=ub))
    assert s.optimal and s.obj == pytest.approx(3.0)
    assert s.iterations < 20


def test_iteration_limit_raises():
    rng = np.random.default_rng(0)
    p = LpProblem(rng.normal(size=6), A_ub=rng.normal(size=(5, 6)), b_ub=np.ones(5), lb=-np.ones(6), ub=np.ones(6))
    with pytest.raises(NumericalFailure):
        solve_lp(p, max_iter=0)


def test_validation():
    with pytest.raises(ValueError):
        LpProblem([1, 2], A_ub=[[1, 2, 3]], b_ub=[1])
    with pytest.raises(ValueError):
        LpProblem([1], lb=[2], ub=[1])
    with pytest.raises(ValueError):
        LpProblem([np.nan])


def test_mps_export_round_trip_fields():
    p = LpProblem([1, 2], A_eq=[[1, 1]], b_eq=[1], A_ub=[[1, -1]], b_ub=[0.5], lb=[-np.inf, 0], ub=[np.inf, 2],
                  names=["a", "b"])
    txt = p.to_mps()
    assert "OBJSENSE" in txt and "MAX" in txt
    assert " FR BND  a" in txt and " UP BND  b  2\n" in txt
    assert txt.strip().endswith("ENDATA")
