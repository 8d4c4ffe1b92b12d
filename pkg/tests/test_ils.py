import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ils_problems import random_problem, random_spd
from mbcpp.ils import (
    IlsError,
    IlsProblem,
    brute_force,
    certified_radius,
    decorrelate,
    solve,
    solve_batch,
    solve_many,
)


def test_diagonal_covariance_is_rounding():
    r = np.array([0.4, -1.6, 2.5001, 7.49])
    sol = solve(IlsProblem(r, np.diag([1.0, 2.0, 0.5, 3.0])))
    np.testing.assert_array_equal(sol.z_hat, [0, -2, 3, 7])
    assert sol.cost == pytest.approx(0.16 + 0.16 / 2 + 0.4999**2 / 0.5 + 0.49**2 / 3)


def test_hand_checked_correlated_problem():
    # strongly correlated 2D case where rounding is wrong; optimum found by enumeration
    S = np.array([[1.0, 0.99], [0.99, 1.0]])
    r = np.array([0.45, -0.45])
    sol = solve(IlsProblem(r, S))
    bf = brute_force(IlsProblem(r, S), box_radius=4)
    np.testing.assert_array_equal(sol.z_hat, bf.z_hat)
    assert sol.cost == pytest.approx(bf.cost)


def test_second_candidate_is_not_better():
    rng = np.random.default_rng(1)
    for _ in range(50):
        r, S = random_problem(rng, n=4)
        sol = solve(IlsProblem(r, S), candidates=2)
        assert sol.second_cost >= sol.cost
        assert not np.array_equal(sol.second_z, sol.z_hat)
        assert sol.ratio >= 1


def test_decorrelation_is_unimodular():
    rng = np.random.default_rng(2)
    for n in range(1, 7):
        S = random_spd(rng, n, (1e-3, 10.0))
        Z, Sz = decorrelate(S)
        assert Z.dtype.kind == "i"
        assert abs(round(np.linalg.det(Z))) == 1
        np.testing.assert_allclose(Sz, Z.T @ S @ Z)
        assert np.linalg.cond(Sz) <= np.linalg.cond(S) * (1 + 1e-9)


@pytest.mark.parametrize("seed", range(5))
def test_matches_brute_force_on_ill_conditioned(seed):
    rng = np.random.default_rng(100 + seed)
    checked = 0
    for _ in range(40):
        r, S = random_problem(rng, eig_range=(1e-3, 1.0), spread=5.0)
        p = IlsProblem(r, S)
        try:
            bf = brute_force(p)
        except IlsError:
            continue  # box too large for enumeration
        checked += 1
        sol = solve(p)
        assert sol.cost == pytest.approx(bf.cost, rel=1e-9, abs=1e-12)
        np.testing.assert_array_equal(sol.z_hat, bf.z_hat)
    assert checked > 20


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.lists(st.integers(-1000, 1000), min_size=6, max_size=6))
def test_lattice_translation_invariance(seed, shift):
    rng = np.random.default_rng(seed)
    r, S = random_problem(rng, n=None, eig_range=(1e-2, 1.0))
    a = np.array(shift[: r.size])
    base = solve(IlsProblem(r, S))
    moved = solve(IlsProblem(r + a, S))
    np.testing.assert_array_equal(moved.z_hat, base.z_hat + a)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(1e-3, 1e3))
def test_positive_scaling_invariance(seed, c):
    rng = np.random.default_rng(seed)
    r, S = random_problem(rng, eig_range=(1e-2, 1.0))
    np.testing.assert_array_equal(solve(IlsProblem(r, c * S)).z_hat, solve(IlsProblem(r, S)).z_hat)


def test_batch_routes_agree_with_single_solve():
    rng = np.random.default_rng(3)
    S = random_spd(rng, 5, (1e-2, 1.0))
    R = rng.uniform(-10, 10, (30, 5))
    Z, costs = solve_batch(R, S)
    Ss = np.broadcast_to(S, (30, 5, 5))
    Z2, costs2, ok = solve_many(R, Ss)
    assert ok.all()
    for i in range(30):
        sol = solve(IlsProblem(R[i], S))
        np.testing.assert_array_equal(Z[i], sol.z_hat)
        np.testing.assert_array_equal(Z2[i], sol.z_hat)
        assert costs[i] == pytest.approx(sol.cost, rel=1e-8)


def test_solve_many_flags_bad_covariance():
    S = np.stack([np.eye(2), -np.eye(2)])
    _, costs, ok = solve_many(np.zeros((2, 2)), S)
    assert ok[0] and not ok[1]
    assert np.isnan(costs[1])


def test_errors_and_edge_cases():
    with pytest.raises(IlsError):
        IlsProblem(np.zeros(2), np.eye(3))
    with pytest.raises(IlsError):
        solve(IlsProblem(np.zeros(2), np.array([[1.0, 2.0], [2.0, 1.0]])))
    with pytest.raises(IlsError):
        solve(IlsProblem(np.zeros(2), np.array([[1.0, 0.5], [0.0, 1.0]])))
    with pytest.raises(IlsError):
        brute_force(IlsProblem(np.zeros(9), np.eye(9)))
    empty = solve(IlsProblem(np.zeros(0), np.zeros((0, 0))))
    assert empty.z_hat.size == 0 and empty.cost == 0


def test_certified_radius_contains_optimum():
    rng = np.random.default_rng(4)
    for _ in range(100):
        r, S = random_problem(rng, n=3, eig_range=(1e-2, 1.0))
        p = IlsProblem(r, S)
        rad = certified_radius(p)
        z = solve(p).z_hat
        assert np.all(np.abs(z - np.floor(r + 0.5)) <= rad)
