import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from penaltyvi.grid import DiscreteField, build_grid
from penaltyvi.limits import default_schedule
from penaltyvi.optcontrol import (ControlProblem, check_c_stationarity, evaluate, multiplier_residual,
                                  reduced_gradient, solve_oc_path, solve_unconstrained_qp)
from penaltyvi.penalty import make_family
from penaltyvi.penalty_solver import solve_penalized
from penaltyvi.verify import OC_SCHEDULE, contact_problem, never_active_problem
from penaltyvi.vi_ref import solve_pdas


def dense_qp(prob):
    """Oracle: normal equations of the reduced quadratic (B^T M B + nu M) f = B^T M y_d, B = K^-1 M."""
    ops = prob.ops
    M = np.diag(ops.mass)
    B = np.linalg.solve(ops.K.toarray(), M)
    H = B.T @ M @ B + prob.nu * M
    return np.linalg.solve(H, B.T @ M @ prob.y_d.values)


def test_exact_fit_has_zero_value_and_gradient(line63):
    grid, ops = line63
    fam = make_family("sm", 0.01, grid, reg="huber_global")
    psi = grid.constant(0.05)
    f = np.full(grid.N, 8.0)
    y = solve_penalized(ops, fam, psi, ops.load(f), tol=1e-13).u_rho
    prob = ControlProblem(ops, psi, y, nu=0.0)
    val, g = reduced_gradient(prob, fam, 0.01, f, f)
    assert abs(val) <= 1e-20
    assert np.max(np.abs(g)) <= 1e-12


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), reg=st.sampled_from(["huber_global", "kw_cubic", "local", "kw_quadratic"]),
       kind=st.sampled_from(["sm", "sc", "sc_tilde"]))
def test_gradient_matches_central_differences(seed, reg, kind):
    rng = np.random.default_rng(seed)
    grid, ops = build_grid(1, (0.0, 1.0), 31)
    psi = DiscreteField(grid, rng.uniform(0.02, 0.1, grid.N))
    prob = ControlProblem(ops, psi, DiscreteField(grid, rng.uniform(0, 0.1, grid.N)), nu=rng.uniform(0, 0.1))
    fam = make_family(kind, 0.05, grid, reg=reg, lambda_bar=rng.uniform(0, 3, grid.N))
    f = rng.uniform(0, 15, grid.N)
    anchor = f + rng.normal(size=grid.N)
    _, g = reduced_gradient(prob, fam, 0.05, f, anchor)
    v = rng.normal(size=grid.N)
    t = 1e-6
    vp, _ = reduced_gradient(prob, fam, 0.05, f + t * v, anchor)
    vm, _ = reduced_gradient(prob, fam, 0.05, f - t * v, anchor)
    fd = (vp - vm) / (2 * t)
    exact = float(g @ (ops.mass * v))  # gradient is the L2 (lumped) Riesz representative
    assert abs(fd - exact) <= 1e-5 * max(abs(exact), 1e-8)


def test_never_active_gradient_is_poisson_control_gradient():
    prob = never_active_problem(63)
    ops = prob.ops
    fam = make_family("sm", 0.01, ops.grid, reg="kw_cubic")
    rng = np.random.default_rng(0)
    f, anchor = rng.normal(size=ops.grid.N), rng.normal(size=ops.grid.N)
    ev = evaluate(prob, fam, f, anchor)
    assert np.all(ev.state.gap < fam.k0)
    y = ops.solve(ops.mass * f)
    expect = ops.solve(ops.mass * (y - prob.y_d.values)) + prob.nu * f + (f - anchor)
    assert np.allclose(ev.gradient, expect, atol=1e-12)


def test_qp_oracle_agrees_with_dense_solve():
    prob = never_active_problem(63)
    f, y = solve_unconstrained_qp(prob)
    assert np.allclose(f, dense_qp(prob), atol=1e-9)
    assert np.allclose(y, prob.ops.solve(prob.ops.mass * f), atol=1e-12)


def test_never_active_path_matches_qp():
    prob = never_active_problem()
    grid = prob.ops.grid
    fam = make_family("sm", 1.0, grid, reg="huber_global")
    cert = solve_oc_path(prob, fam, default_schedule(), np.zeros(grid.N))
    f_qp, _ = solve_unconstrained_qp(prob)
    assert prob.l2(cert.f_bar.values - f_qp) <= 1e-6
    assert cert.multiplier_residual <= 1e-6
    vi = solve_pdas(prob.ops, prob.psi, prob.ops.load(cert.f_bar.values))
    rep = check_c_stationarity(cert, vi, prob)
    assert rep["n_active"] == 0
    assert rep["max_nu_I"] <= 1e-8


@pytest.fixture(scope="module")
def contact_cert():
    prob = contact_problem()
    grid = prob.ops.grid
    fam = make_family("sm", 1.0, grid, reg="huber_global")
    cert = solve_oc_path(prob, fam, OC_SCHEDULE, np.full(grid.N, 12.0))
    vi = solve_pdas(prob.ops, prob.psi, prob.ops.load(cert.f_bar.values))
    return prob, cert, vi


def test_contact_path_stationarity(contact_cert):
    prob, cert, vi = contact_cert
    rep = check_c_stationarity(cert, vi, prob)
    assert cert.multiplier_residual <= 1e-4
    assert rep["max_nu_I"] <= 1e-4
    assert rep["max_p_As"] <= 1e-4
    assert rep["sign_functional"] >= -1e-6
    assert np.all(cert.f_bar.values == 8.0)  # the lower control bound is optimal everywhere


def test_contact_path_objective_regression(contact_cert):
    _, cert, _ = contact_cert
    obj = np.array([r["objective"] for r in cert.path])
    assert np.all(np.diff(obj[:6]) < 0)
    # with f pinned at the bound, J follows S_rho(8) - y_d, which turns up by ~1e-7 once rho < 4^-6
    assert obj[-1] == pytest.approx(0.321776335512, rel=1e-9)
    assert np.max(np.diff(obj[5:])) == pytest.approx(1.2956e-7, rel=1e-3)


def test_stationarity_needs_extended_schedule():
    prob = contact_problem()
    grid = prob.ops.grid
    fam = make_family("sm", 1.0, grid, reg="huber_global")
    cert = solve_oc_path(prob, fam, default_schedule(8), np.full(grid.N, 12.0))
    vi = solve_pdas(prob.ops, prob.psi, prob.ops.load(cert.f_bar.values))
    assert check_c_stationarity(cert, vi, prob)["max_nu_I"] == pytest.approx(2.5566e-4, rel=1e-3)


def test_singleton_box_returns_that_control(line63):
    grid, ops = line63
    fhat = np.linspace(1, 3, grid.N)
    prob = ControlProblem(ops, grid.constant(0.1), grid.constant(0.0), nu=0.1, lo=fhat, up=fhat)
    fam = make_family("sm", 1.0, grid, reg="local")
    cert = solve_oc_path(prob, fam, [0.25, 0.0625], fhat)
    assert np.array_equal(cert.f_bar.values, fhat)
    assert cert.multiplier_residual == 0.0


def test_zero_adjoint_sign_functional(contact_cert):
    prob, cert, vi = contact_cert
    from dataclasses import replace
    zero = replace(cert, p=DiscreteField(prob.ops.grid, np.zeros(prob.ops.grid.N)))
    assert check_c_stationarity(zero, vi, prob)["sign_functional"] == 0.0


def test_multiplier_residual_definition(line63):
    grid, ops = line63
    prob = ControlProblem(ops, grid.constant(1.0), grid.constant(0.0), nu=0.5, lo=0.0, up=1.0)
    f = np.zeros(grid.N)
    # p > 0 at the lower bound points into the normal cone: stationary
    assert multiplier_residual(prob, f, np.ones(grid.N)) == 0.0
    assert multiplier_residual(prob, f, -np.ones(grid.N)) > 0


def test_validation(line63):
    grid, ops = line63
    with pytest.raises(ValueError):
        ControlProblem(ops, grid.constant(0.0), grid.constant(0.0), lo=1.0, up=0.0)
    with pytest.raises(ValueError):
        ControlProblem(ops, grid.constant(0.0), grid.constant(0.0), nu=-1.0)
    prob = ControlProblem(ops, grid.constant(0.0), grid.constant(0.0), lo=0.0, up=1.0)
    with pytest.raises(ValueError):
        solve_oc_path(prob, make_family("m", 1.0, grid), [0.5], np.zeros(grid.N))
    fam = make_family("sm", 1.0, grid, reg="local")
    with pytest.raises(ValueError):
        solve_oc_path(prob, fam, [0.5], np.full(grid.N, 2.0))
    with pytest.raises(ValueError):
        solve_oc_path(prob, fam, [0.5, 0.5], np.zeros(grid.N))


def test_certificate_serializes(contact_cert):
    _, cert, _ = contact_cert
    d = cert.to_dict()
    assert d["rho"] == OC_SCHEDULE[-1]
    assert len(d["f_bar"]) == 255 and d["c_stationarity"] is not None
