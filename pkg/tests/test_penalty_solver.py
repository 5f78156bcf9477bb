import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from penaltyvi.grid import DiscreteField, build_grid, norm, solve_poisson
from penaltyvi.penalty import SHIFTED_KINDS, complementarity_weight, growth_constant, make_family
from penaltyvi.penalty_solver import (a_priori_bound, feasibility_bound, lipschitz_probe, solve_penalized)
from penaltyvi.verify import family_specs
from penaltyvi.vi_ref import solve_pdas


def family(kind, reg, rho, ops, psi, F):
    lam = complementarity_weight(ops, psi, F) if kind in SHIFTED_KINDS else None
    return make_family(kind, rho, ops.grid, reg=reg, lambda_bar=lam)


def raw_residual(ops, fam, psi, F, u):
    return ops.K @ u + ops.mass * fam.value(u - psi.values) - F.values


def test_inactive_penalty_is_poisson(line63):
    grid, ops = line63
    F = ops.load(-np.abs(np.sin(7 * grid.coords()[0])))
    psi = grid.constant(0.2)
    sol = solve_penalized(ops, make_family("m", 0.1, grid), psi, F)
    assert np.allclose(sol.u_rho.values, solve_poisson(ops, F).values, atol=1e-14)
    assert sol.newton_iters <= 1


def test_analytic_instance_small_rho():
    grid, ops = build_grid(1, (0.0, 1.0), 255)
    psi, F = grid.constant(0.5), ops.load(8.0)
    sol = solve_penalized(ops, make_family("m", 1e-6, grid), psi, F)
    u = solve_pdas(ops, psi, F).u.values
    assert np.max(np.abs(sol.u_rho.values - u)) <= 1e-3


@pytest.mark.parametrize("kind,reg", [("m", None), ("c", None), ("sm", "huber_global")])
def test_zero_data_gives_zero(line63, kind, reg):
    grid, ops = line63
    fam = make_family(kind, 0.05, grid, reg=reg, lambda_bar=0.0 if kind == "c" else None)
    sol = solve_penalized(ops, fam, grid.constant(0.0), ops.load(0.0))
    assert np.max(np.abs(sol.u_rho.values)) <= 1e-14


def test_zero_data_with_positive_m_at_zero_is_not_zero(line63):
    # the quadratic smoothing has m(0) > 0, so the penalty pushes u below psi = 0
    grid, ops = line63
    fam = make_family("sm", 0.05, grid, reg="kw_quadratic")
    assert fam.eval(0, 0.0) > 0
    sol = solve_penalized(ops, fam, grid.constant(0.0), ops.load(0.0))
    assert np.all(sol.u_rho.values < 0)


@pytest.mark.parametrize("kind,reg", family_specs())
@pytest.mark.parametrize("rho", [0.5, 1e-2, 1e-5])
def test_residual_is_small(kind, reg, rho):
    grid, ops = build_grid(1, (0.0, 1.0), 63)
    psi = grid.interpolate(lambda x: 0.3 + 0.2 * np.cos(6 * x))
    F = ops.load(12.0 * np.sin(3 * grid.coords()[0]))
    fam = family(kind, reg, rho, ops, psi, F)
    sol = solve_penalized(ops, fam, psi, F, tol=1e-10)
    r = grid.dual(raw_residual(ops, fam, psi, F, sol.u_rho.values))
    assert norm(ops, r, "Hminus1") <= 1e-8 * (1 + norm(ops, F, "Hminus1"))
    assert sol.residual_norm <= sol.tolerance


def test_xi_rho_is_penalty_force(line63):
    grid, ops = line63
    psi, F = grid.constant(0.05), ops.load(8.0)
    fam = make_family("sm", 0.01, grid, reg="local")
    sol = solve_penalized(ops, fam, psi, F)
    assert np.allclose(sol.xi_rho.values, ops.mass * fam.value(sol.gap), atol=1e-9)


def test_kink_detection_on_biactive_instance(line63):
    grid, ops = line63
    sol = solve_penalized(ops, make_family("m", 0.1, grid), grid.constant(0.0), ops.load(0.0))
    assert not sol.gateaux_flag
    assert sol.kink_nodes.size == grid.N


def test_lipschitz_equal_arguments(line63):
    grid, ops = line63
    F = ops.load(1.0)
    assert lipschitz_probe(ops, make_family("m", 0.1, grid), grid.constant(0.0), F, F) == 0.0


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), spec=st.sampled_from(family_specs()), rho=st.sampled_from([0.1, 0.01]))
def test_lipschitz_one(seed, spec, rho):
    rng = np.random.default_rng(seed)
    grid, ops = build_grid(1, (0.0, 1.0), 31)
    psi = DiscreteField(grid, rng.uniform(0.0, 0.3, grid.N))
    fam = make_family(spec[0], rho, grid, reg=spec[1], lambda_bar=rng.uniform(0, 5, grid.N))
    f = ops.load(rng.uniform(-5, 30, grid.N))
    g = ops.load(rng.uniform(-5, 30, grid.N))
    assert lipschitz_probe(ops, fam, psi, f, g) <= 1 + 1e-6


@pytest.mark.parametrize("kind,reg", family_specs())
def test_a_priori_and_feasibility_bounds(kind, reg):
    grid, ops = build_grid(1, (0.0, 1.0), 63)
    psi = grid.interpolate(lambda x: 0.1 - 0.3 * x)
    F = ops.load(9.0)
    fam = family(kind, reg, 1.0, ops, psi, F)
    C = growth_constant(fam)
    for rho in (0.25, 1e-2, 1e-3):
        sol = solve_penalized(ops, fam.with_rho(rho), psi, F)
        assert norm(ops, sol.u_rho, "H10") <= a_priori_bound(ops, fam, psi, F, C) + 1e-10
        viol = DiscreteField(grid, np.maximum(sol.gap, 0.0))
        assert norm(ops, viol, "L2") <= feasibility_bound(ops, psi, F, rho, C) + 1e-10


def test_warm_start_agrees_with_cold_start(line63):
    grid, ops = line63
    psi, F = grid.constant(0.5), ops.load(8.0)
    fam = make_family("sm", 1e-4, grid, reg="kw_cubic")
    cold = solve_penalized(ops, fam, psi, F)
    warm = solve_penalized(ops, fam, psi, F, u0=solve_penalized(ops, fam.with_rho(4e-4), psi, F).u_rho)
    assert np.allclose(cold.u_rho.values, warm.u_rho.values, atol=1e-10)


def test_rejects_bad_tolerance_and_mismatched_grid(line63):
    grid, ops = line63
    with pytest.raises(ValueError):
        solve_penalized(ops, make_family("m", 0.1, grid), grid.constant(0.0), ops.load(1.0), tol=0.0)
    other, _ = build_grid(1, (0.0, 1.0), 5)
    with pytest.raises(ValueError):
        solve_penalized(ops, make_family("m", 0.1, other), grid.constant(0.0), ops.load(1.0))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_penalized_solution_lies_above_vi_solution_for_m(seed):
    # with kind m the penalized solution overshoots the obstacle: u_rho >= u
    rng = np.random.default_rng(seed)
    grid, ops = build_grid(1, (0.0, 1.0), 20)
    psi = DiscreteField(grid, rng.uniform(0, 0.3, grid.N))
    F = ops.load(rng.uniform(-5, 30, grid.N))
    u = solve_pdas(ops, psi, F).u.values
    u_rho = solve_penalized(ops, make_family("m", 0.01, grid), psi, F).u_rho.values
    assert np.all(u_rho >= u - 1e-10)
