import numpy as np
import pytest
from scipy.optimize import linprog

from tools.transport_simplex import solve_transport, vogel_initial_basis
from utils.errors import ShapeError


def lp_cost(a, b, cost):
    m, n = cost.shape
    res = linprog(
        cost.ravel(),
        A_eq=np.vstack([np.kron(np.eye(m), np.ones((1, n))), np.kron(np.ones((1, m)), np.eye(n))]),
        b_eq=np.concatenate([a, b]),
        bounds=(0, None),
        method="highs",
    )
    assert res.status == 0
    return res.fun


def marginals(rng, m, n):
    a = rng.random(m)
    b = rng.random(n)
    return a / a.sum(), b / b.sum()


def test_vogel_basis_is_a_feasible_spanning_tree():
    rng = np.random.default_rng(1)
    for m, n in [(1, 1), (1, 4), (3, 2), (5, 5), (6, 9)]:
        a, b = marginals(rng, m, n)
        flow, basis = vogel_initial_basis(a, b, rng.random((m, n)))
        assert len(basis) == m + n - 1
        assert len(set(basis)) == len(basis)
        np.testing.assert_allclose(flow.sum(axis=1), a, atol=1e-12)
        np.testing.assert_allclose(flow.sum(axis=0), b, atol=1e-12)
        assert (flow >= 0).all()


def test_textbook_instance():
    a = np.array([20.0, 30.0, 25.0])
    b = np.array([10.0, 10.0, 35.0, 40.0])
    # rescale demand to the supply total
    b = b * (a.sum() / b.sum())
    cost = np.array([[8.0, 6.0, 10.0, 9.0], [9.0, 12.0, 13.0, 7.0], [14.0, 9.0, 16.0, 5.0]])
    res = solve_transport(a, b, cost)
    assert res.cost == pytest.approx(lp_cost(a, b, cost), rel=1e-9)


def test_random_instances_match_linprog():
    rng = np.random.default_rng(2)
    for _ in range(60):
        m, n = rng.integers(1, 7, size=2)
        a, b = marginals(rng, m, n)
        cost = rng.random((m, n)) * 10
        res = solve_transport(a, b, cost)
        assert res.cost == pytest.approx(lp_cost(a, b, cost), abs=1e-9)
        np.testing.assert_allclose(res.flow.sum(axis=1), a, atol=1e-12)
        np.testing.assert_allclose(res.flow.sum(axis=0), b, atol=1e-12)


def test_degenerate_marginals_and_ties():
    # equal marginals on an identity-like cost make every Vogel step close a row and a column together
    n = 6
    a = np.full(n, 1.0 / n)
    cost = 1.0 - np.eye(n)
    res = solve_transport(a, a, cost)
    assert res.cost == pytest.approx(0.0, abs=1e-15)

    # all costs equal: every plan is optimal
    res = solve_transport(a, a[::-1].copy(), np.ones((n, n)))
    assert res.cost == pytest.approx(1.0)


def test_zero_mass_rows_are_allowed():
    a = np.array([0.0, 0.5, 0.5, 0.0])
    b = np.array([0.25, 0.25, 0.25, 0.25])
    cost = np.arange(16, dtype=float).reshape(4, 4) % 5
    res = solve_transport(a, b, cost)
    assert res.cost == pytest.approx(lp_cost(a, b, cost), abs=1e-12)
    assert res.flow[0].sum() == 0.0 and res.flow[3].sum() == 0.0


def test_potentials_certify_the_plan():
    rng = np.random.default_rng(3)
    a, b = marginals(rng, 5, 4)
    cost = rng.random((5, 4))
    res = solve_transport(a, b, cost)
    reduced = cost - res.u[:, None] - res.v[None, :]
    assert reduced.min() >= -1e-10
    assert res.dual_objective == pytest.approx(res.cost, abs=1e-12)
    # potentials are pinned by u[0] = 0
    assert res.u[0] == 0.0


def test_mismatched_marginals_raise():
    with pytest.raises(ShapeError):
        solve_transport(np.ones(3) / 3, np.ones(2) / 2, np.zeros((2, 2)))
