import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from penaltyvi.grid import build_grid, norm, solve_poisson
from penaltyvi.penalty import make_family
from penaltyvi.penalty_solver import solve_penalized
from penaltyvi.sensitivity import (DerivativeOperator, NotGateaux, WeightMeasure, extract_measure,
                                   solve_derivative, solve_weighted)


def dense_weighted(ops, w, d):
    """Oracle: eliminate infinite nodes by hand and solve densely."""
    free = ~np.isinf(w)
    A = ops.K.toarray() + np.diag(ops.mass * np.where(free, w, 0.0))
    y = np.zeros(ops.grid.N)
    y[free] = np.linalg.solve(A[np.ix_(free, free)], d[free])
    return y


def test_inverse_laplacian_at_zero(line63, rng):
    grid, ops = line63
    psi, F0 = grid.constant(0.0), ops.load(0.0)
    for rho in 4.0 ** -np.arange(1, 9):
        fam = make_family("sm", rho, grid, reg="huber_global")
        sol = solve_penalized(ops, fam, psi, F0)
        d = grid.dual(rng.normal(size=grid.N))
        a = solve_derivative(ops, fam, sol, psi, d)
        assert np.max(np.abs(a.values - solve_poisson(ops, d).values)) <= 1e-12


def test_derivative_vanishes_on_strictly_active_instance(rng):
    grid, ops = build_grid(1, (0.0, 4.0), 63)
    psi, F = grid.constant(0.0), ops.load(1.0)
    d = grid.dual(np.abs(rng.normal(size=grid.N)))
    prev = np.inf
    for rho in (1e-1, 1e-3, 1e-5, 1e-7):
        fam = make_family("m", rho, grid)
        a = solve_derivative(ops, fam, solve_penalized(ops, fam, psi, F), psi, d)
        m = np.max(np.abs(a.values))
        assert m < prev
        prev = m
    assert prev < 1e-5


@pytest.mark.parametrize("reg", ["huber_global", "kw_cubic", "local", "kw_quadratic"])
@pytest.mark.parametrize("kind", ["sm", "sc", "sc_tilde"])
def test_finite_difference(kind, reg, rng):
    grid, ops = build_grid(1, (0.0, 1.0), 63)
    psi, F = grid.constant(0.5), ops.load(8.0)
    fam = make_family(kind, 1e-2, grid, reg=reg, lambda_bar=8.0)
    sol = solve_penalized(ops, fam, psi, F, tol=1e-13)
    d = grid.dual(rng.normal(size=grid.N) * ops.mass)
    a = solve_derivative(ops, fam, sol, psi, d)
    t = 1e-6
    up = solve_penalized(ops, fam, psi, F + d * t, tol=1e-13, u0=sol.u_rho).u_rho
    dn = solve_penalized(ops, fam, psi, F - d * t, tol=1e-13, u0=sol.u_rho).u_rho
    q = (up - dn) * (1 / (2 * t))
    assert norm(ops, q - a, "H10") <= 1e-4 * norm(ops, a, "H10")


def test_extract_measure_branches(line63):
    grid, ops = line63
    rho = 0.1
    # inactive: far below the obstacle
    fam = make_family("m", rho, grid)
    sol = solve_penalized(ops, fam, grid.constant(10.0), ops.load(1.0))
    assert np.all(extract_measure(fam, sol, grid.constant(10.0)).weights == 0)
    # deep contact: u_rho - psi beyond k1 everywhere
    psi = grid.constant(-1.0, with_trace=False)
    sol = solve_penalized(ops, fam, psi, ops.load(1000.0))
    assert np.all(sol.gap > fam.k1)
    assert np.allclose(extract_measure(fam, sol, psi).weights, 1 / rho)


def test_huber_weight_mid_transition(line63):
    grid, ops = line63
    rho = 0.1
    fam = make_family("sm", rho, grid, reg="huber_global")
    assert fam.slope(np.array([rho / 2]))[0] == pytest.approx(1 / (2 * rho))


def test_solve_weighted_extremes(line63, rng):
    grid, ops = line63
    d = grid.dual(rng.normal(size=grid.N))
    assert np.allclose(solve_weighted(ops, WeightMeasure.zero(grid.N), d).values, solve_poisson(ops, d).values)
    inf = WeightMeasure(np.full(grid.N, np.inf))
    assert np.all(solve_weighted(ops, inf, d).values == 0)


def test_weighted_equals_derivative(line63, rng):
    grid, ops = line63
    psi, F = grid.constant(0.5), ops.load(8.0)
    fam = make_family("sm", 1e-3, grid, reg="kw_cubic")
    sol = solve_penalized(ops, fam, psi, F)
    mu = extract_measure(fam, sol, psi)
    for _ in range(5):
        d = grid.dual(rng.normal(size=grid.N))
        a = solve_weighted(ops, mu, d).values
        b = solve_derivative(ops, fam, sol, psi, d).values
        c = DerivativeOperator(ops, mu)(d).values
        assert np.max(np.abs(a - b)) <= 1e-12
        assert np.max(np.abs(a - c)) <= 1e-12


def test_kink_raises_not_gateaux(line63):
    grid, ops = line63
    fam = make_family("m", 0.1, grid)
    psi = grid.constant(0.0)
    sol = solve_penalized(ops, fam, psi, ops.load(0.0))
    with pytest.raises(NotGateaux) as e:
        solve_derivative(ops, fam, sol, psi, grid.dual(np.ones(grid.N)))
    assert e.value.nodes.size == grid.N


def test_weight_measure_validation():
    with pytest.raises(ValueError):
        WeightMeasure(np.array([1.0, -1.0]))
    with pytest.raises(ValueError):
        WeightMeasure(np.array([np.nan]))
    mu = WeightMeasure.from_sets(4, np.array([True, False, False, True]), finite=[0, 1, 2, 3])
    assert mu.infinite.tolist() == [True, False, False, True]
    assert mu.weights[1:3].tolist() == [1.0, 2.0]
    with pytest.raises(ValueError):
        mu.weights[0] = 0


def test_size_mismatch_rejected(line63):
    grid, ops = line63
    with pytest.raises(ValueError):
        solve_weighted(ops, WeightMeasure.zero(grid.N + 1), grid.dual(np.ones(grid.N)))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), n=st.integers(1, 25), p_inf=st.floats(0, 1))
def test_weighted_solve_matches_dense_oracle(seed, n, p_inf):
    rng = np.random.default_rng(seed)
    grid, ops = build_grid(1, (0.0, 1.0), n)
    w = rng.uniform(0, 100, n)
    w[rng.random(n) < p_inf] = np.inf
    d = rng.normal(size=n)
    got = solve_weighted(ops, WeightMeasure(w), grid.dual(d)).values
    assert np.allclose(got, dense_weighted(ops, w, d), atol=1e-12, rtol=1e-10)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_weighted_operator_contracts(seed):
    # ||L_mu d||_H10 <= ||d||_H-1 for any nonnegative (possibly infinite) weight
    rng = np.random.default_rng(seed)
    grid, ops = build_grid(1, (0.0, 1.0), 30)
    w = rng.exponential(50, grid.N)
    w[rng.random(grid.N) < 0.3] = np.inf
    d = grid.dual(rng.normal(size=grid.N))
    a = solve_weighted(ops, WeightMeasure(w), d)
    assert norm(ops, a, "H10") <= norm(ops, d, "Hminus1") * (1 + 1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_weighted_operator_is_order_preserving(seed):
    rng = np.random.default_rng(seed)
    grid, ops = build_grid(1, (0.0, 1.0), 20)
    w = rng.exponential(20, grid.N)
    d = grid.dual(rng.uniform(0, 1, grid.N))
    assert np.all(solve_weighted(ops, WeightMeasure(w), d).values >= -1e-15)
