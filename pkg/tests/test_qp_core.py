import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tailsafe.qp_core import (STATUS_INFEASIBLE, STATUS_OPTIMAL, Constraint, QpProblem, QpSolution, solve,
                              verify_kkt)


def _box(label, i, bound, n=2):
    up, lo = np.zeros(n), np.zeros(n)
    up[i], lo[i] = 1.0, -1.0
    return [Constraint(f"{label}_upper", up, bound), Constraint(f"{label}_lower", lo, bound)]


def test_unconstrained_minimiser():
    sol = solve(QpProblem(np.eye(2), np.array([-1.0, -2.0])))
    np.testing.assert_allclose(sol.x_star, [1.0, 2.0], atol=1e-14)
    assert sol.status == STATUS_OPTIMAL


def test_box_active_with_multiplier():
    prob = QpProblem(np.eye(2), np.array([-1.0, -2.0]), tuple(_box("x1", 0, 0.5)))
    sol = solve(prob)
    np.testing.assert_allclose(sol.x_star, [0.5, 2.0], atol=1e-14)
    assert sol.multipliers["x1_upper"] == pytest.approx(0.5, abs=1e-14)
    assert sol.multipliers["x1_lower"] == 0.0
    assert sol.active_set == ["x1_upper"]


def test_zero_linear_term_gives_origin():
    prob = QpProblem(np.diag([2.0, 3.0]), np.zeros(2), tuple(_box("a", 0, 1.0) + _box("b", 1, 1.0)))
    sol = solve(prob)
    assert np.all(sol.x_star == 0.0)
    assert all(v == 0.0 for v in sol.multipliers.values())


def test_equality_row_enforced():
    rows = (Constraint("pin", [0.0, 1.0], 0.0, equality=True),)
    sol = solve(QpProblem(np.eye(2), np.array([-1.0, -2.0]), rows))
    np.testing.assert_allclose(sol.x_star, [1.0, 0.0], atol=1e-14)
    assert sol.multipliers["pin"] == pytest.approx(2.0)


def test_soft_row_uses_slack():
    # x <= 1 + s, penalty rho s^2: minimiser of 1/2 (x-3)^2 + rho s^2 with x = 1 + s
    rho = 2.0
    rows = (Constraint("soft", [1.0, -1.0], 1.0),)
    sol = solve(QpProblem(np.eye(1), np.array([-3.0]), rows, slack_penalty_rho=rho, n_slack=1))
    s = 2.0 / (1.0 + 2.0 * rho)
    assert sol.s_star[0] == pytest.approx(s, rel=1e-12)
    assert sol.x_star[0] == pytest.approx(1.0 + s, rel=1e-12)


def test_infeasible_reported():
    rows = (Constraint("a", [1.0, 0.0], -1.0), Constraint("b", [-1.0, 0.0], -1.0))
    sol = solve(QpProblem(np.eye(2), np.zeros(2), rows))
    assert sol.status == STATUS_INFEASIBLE


def test_nonzero_start_via_phase_one():
    rows = (Constraint("floor", [-1.0, 0.0], -2.0),)  # x1 >= 2
    sol = solve(QpProblem(np.eye(2), np.zeros(2), rows))
    np.testing.assert_allclose(sol.x_star, [2.0, 0.0], atol=1e-12)


def test_problem_validation():
    with pytest.raises(ValueError):
        QpProblem(np.array([[1.0, 0.0], [0.0, -1.0]]), np.zeros(2))
    with pytest.raises(ValueError):
        QpProblem(np.eye(2), np.zeros(2), (Constraint("a", [1.0, 0.0], 1.0), Constraint("a", [0.0, 1.0], 1.0)))
    with pytest.raises(ValueError):
        QpProblem(np.eye(2), np.zeros(2), (Constraint("a", [1.0, 0.0, 0.0], 1.0),))


# verify_kkt

def _solved():
    prob = QpProblem(np.eye(2), np.array([-1.0, -2.0]), tuple(_box("x1", 0, 0.5) + _box("x2", 1, 5.0)))
    return prob, solve(prob)


def test_kkt_passes_on_solver_output():
    prob, sol = _solved()
    assert verify_kkt(prob, sol).passed


def test_kkt_detects_perturbed_point():
    prob, sol = _solved()
    bad = QpSolution(sol.x_star + np.array([0.0, 1e-3]), sol.s_star, sol.multipliers, sol.active_set, 0.0,
                     sol.status, 0.0)
    rep = verify_kkt(prob, bad)
    assert rep.stationarity > 1e-8 and not rep.passed


def test_kkt_detects_flipped_multiplier():
    prob, sol = _solved()
    mult = dict(sol.multipliers)
    mult["x1_upper"] = -mult["x1_upper"]
    rep = verify_kkt(prob, QpSolution(sol.x_star, sol.s_star, mult, sol.active_set, 0.0, sol.status, 0.0))
    assert rep.dual_feasibility > 1e-8 and not rep.passed


# independent oracle: enumerate active sets on small problems

def _enumerate(H, f, A, b):
    n, m = H.shape[0], A.shape[0]
    best = None
    for k in range(m + 1):
        for S in itertools.combinations(range(m), k):
            S = list(S)
            K = np.block([[H, A[S].T], [A[S], np.zeros((k, k))]]) if k else H
            rhs = np.concatenate([-f, b[S]]) if k else -f
            try:
                sol = np.linalg.solve(K, rhs)
            except np.linalg.LinAlgError:
                continue
            x, lam = sol[:n], sol[n:]
            if np.all(A @ x <= b + 1e-9) and np.all(lam >= -1e-9):
                best = x
                return best
    return best


@settings(max_examples=150, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_matches_active_set_enumeration(seed):
    rng = np.random.default_rng(seed)
    n, m = 2, int(rng.integers(1, 6))
    M = rng.normal(size=(n, n))
    H = M @ M.T + 0.1 * np.eye(n)
    f = rng.normal(size=n) * 3
    A = rng.normal(size=(m, n))
    b = rng.uniform(0.1, 2.0, m)  # origin strictly feasible
    rows = tuple(Constraint(f"r{i}", A[i], b[i]) for i in range(m))
    sol = solve(QpProblem(H, f, rows))
    oracle = _enumerate(H, f, A, b)
    assert sol.status == STATUS_OPTIMAL
    np.testing.assert_allclose(sol.x_star, oracle, atol=1e-8)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_row_order_does_not_change_solution(seed):
    rng = np.random.default_rng(seed)
    m = int(rng.integers(2, 8))
    M = rng.normal(size=(2, 2))
    H = M @ M.T + 0.05 * np.eye(2)
    A = rng.normal(size=(m, 2))
    b = rng.uniform(0.0, 1.0, m)
    rows = tuple(Constraint(f"r{i}", A[i], b[i]) for i in range(m))
    prob = QpProblem(H, rng.normal(size=2) * 4, rows)
    a = solve(prob)
    p = solve(prob.permuted(rng.permutation(m)))
    assert np.max(np.abs(a.x_star - p.x_star)) <= 1e-8
    assert verify_kkt(prob, a).passed
