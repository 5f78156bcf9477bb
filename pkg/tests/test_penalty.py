import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from penaltyvi.grid import build_grid
from penaltyvi.penalty import (FAMILY_KINDS, REGULARIZATION_KINDS, SHIFTED_KINDS, SMOOTH_KINDS,
                               complementarity_weight, custom_regularization, growth_constant, make_family,
                               make_regularization, verify_assumptions)

GRID, OPS = build_grid(1, (0.0, 1.0), 3)
SPECS = [(k, None) for k in ("m", "c")] + [(k, r) for k in SMOOTH_KINDS for r in REGULARIZATION_KINDS]


def fam_of(kind, rho, reg=None, lam=1.5):
    return make_family(kind, rho, GRID, reg=reg, lambda_bar=lam if kind in SHIFTED_KINDS else None)


# ------------------------------------------------------------------ examples

def test_sc_huber_structural_data():
    fam = make_family("sc", 0.1, GRID, reg="huber_global", lambda_bar=2.0)
    assert np.allclose(fam.k0, -0.2)
    assert np.allclose(fam.k1, -0.1)
    assert np.allclose(fam.j, 0.15)


def test_m_structural_data_vanishes():
    fam = make_family("m", 0.5, GRID)
    for a in (fam.k0, fam.k1, fam.j):
        assert np.all(a == 0)


def test_c_with_zero_weight_equals_m():
    r = np.linspace(-2, 2, 401)
    c = make_family("c", 0.25, GRID, lambda_bar=0.0)
    m = make_family("m", 0.25, GRID)
    for i in range(GRID.N):
        assert [c.eval(i, x) for x in r] == [m.eval(i, x) for x in r]
        assert [c.dir_deriv_at(i, x, 1.0) for x in r] == [m.dir_deriv_at(i, x, 1.0) for x in r]


def test_eval_examples():
    sm = make_family("sm", 0.1, GRID, reg="huber_global")
    assert sm.eval(0, 0.05) == pytest.approx(0.125)
    m = make_family("m", 0.5, GRID)
    assert m.eval(0, -1.0) == 0.0
    assert m.eval(0, 1.0) == pytest.approx(2.0)


def test_dir_deriv_examples():
    m = make_family("m", 0.25, GRID)
    assert m.dir_deriv_at(1, 0.0, -3.0) == 0.0
    assert m.dir_deriv_at(1, 0.0, 2.0) == pytest.approx(8.0)
    sm = make_family("sm", 0.1, GRID, reg="huber_global")
    assert sm.dir_deriv_at(0, 0.05, 1.0) == pytest.approx(5.0)


@pytest.mark.parametrize("kind,reg", SPECS)
def test_dir_deriv_zero_direction(kind, reg):
    fam = fam_of(kind, 0.3, reg)
    for r in (-1.0, -0.45, 0.0, 0.01, 2.0):
        assert fam.dir_deriv_at(0, r, 0.0) == 0.0


def test_newton_slope_examples():
    m = make_family("m", 0.5, GRID)
    assert m.newton_slope(0, 0.0) == pytest.approx(2.0)
    assert m.newton_slope(0, -0.1) == 0.0
    sm = make_family("sm", 0.1, GRID, reg="huber_global")
    assert sm.newton_slope(0, 0.2) == pytest.approx(10.0)


def test_huber_assumptions_pass():
    rep = verify_assumptions(make_family("sm", 1.0, GRID, reg="huber_global"), (1.0, 0.5, 0.25, 0.125))
    assert rep.passed, rep.failed()


def test_broken_regularization_fails_eventually_linear():
    bad = custom_regularization(lambda r: np.where(r > 0, r**2, 0.0), lambda r: np.where(r > 0, 2 * r, 0.0),
                                theta=0.0, Theta=0.1, l=0.0)
    rep = verify_assumptions(make_family("sm", 0.1, GRID, reg=bad))
    assert not rep.passed
    assert not rep["eventually_linear"].passed


def test_c_growth_constant_matches_direct_norm():
    fam = make_family("c", 0.5, GRID, lambda_bar=1.0)
    rep = verify_assumptions(fam, (0.5, 0.25))
    assert rep.passed
    # ||k0|| = ||k1|| = rho ||lambda_bar||_L2 exactly, so the ratio is 2 ||lambda_bar||_L2
    lam_l2 = np.sqrt(np.sum(OPS.mass * 1.0**2))
    assert rep.growth_constant == pytest.approx(2 * lam_l2, rel=1e-12)
    assert growth_constant(fam) == pytest.approx(2 * lam_l2, rel=1e-12)


@pytest.mark.parametrize("reg,theta,Theta,l", [
    ("huber_global", 0.0, 1.0, -0.5), ("kw_cubic", -0.5, 0.5, 0.0), ("local", -1.0, 1.0, 0.0)])
def test_regularization_parameters(reg, theta, Theta, l):
    for rho in (0.1, 0.2, 0.3):
        R = make_regularization(reg, rho)
        assert (R.theta, R.Theta, R.l) == pytest.approx((theta * rho, Theta * rho, l * rho))


def test_sc_tilde_rescales_regularization():
    rho = 0.2
    a = make_family("sc_tilde", rho, GRID, reg="huber_global", lambda_bar=0.0)
    # r -> rho m_rho(r / rho) has transition width rho^2
    assert a.reg.Theta == pytest.approx(rho**2)
    assert a.reg.l == pytest.approx(-rho**2 / 2)


def test_constructor_validation():
    with pytest.raises(ValueError):
        make_family("zz", 0.1, GRID)
    with pytest.raises(ValueError):
        make_family("m", -1.0, GRID)
    with pytest.raises(ValueError):
        make_family("c", 0.1, GRID)
    with pytest.raises(ValueError):
        make_family("sm", 0.1, GRID)
    with pytest.raises(ValueError):
        make_family("c", 0.1, GRID, lambda_bar=-1.0)
    with pytest.raises(ValueError):
        make_regularization("nope", 0.1)


def test_complementarity_weight_constant_obstacle():
    _, ops = build_grid(1, (0.0, 1.0), 9)
    psi = ops.grid.constant(0.5)
    assert np.allclose(complementarity_weight(ops, psi, ops.load(8.0)), 8.0)
    assert np.allclose(complementarity_weight(ops, psi, ops.load(-3.0)), 0.0)


def test_with_rho_keeps_kind_and_weight():
    fam = make_family("sc", 0.5, GRID, reg="kw_cubic", lambda_bar=np.array([0.0, 1.0, 2.0]))
    g = fam.with_rho(0.01)
    assert (g.kind, g.rho) == ("sc", 0.01)
    assert np.allclose(g.k1, 0.005 - 0.01 * np.array([0.0, 1.0, 2.0]))


# ------------------------------------------------------------------ properties

rhos = st.sampled_from([1.0, 0.25, 4.0**-4, 0.037])
reals = st.floats(-3, 3, allow_nan=False)
specs = st.sampled_from(SPECS)


@settings(max_examples=300, deadline=None)
@given(spec=specs, rho=rhos, a=reals, b=reals)
def test_monotone_and_lipschitz(spec, rho, a, b):
    fam = fam_of(spec[0], rho, spec[1])
    fa, fb = fam.eval(2, a), fam.eval(2, b)
    lo, hi = (fa, fb) if a <= b else (fb, fa)
    assert lo <= hi + 1e-12
    assert abs(fa - fb) <= abs(a - b) / rho * (1 + 1e-9) + 1e-12


@settings(max_examples=300, deadline=None)
@given(spec=specs, rho=rhos, a=reals, b=reals, t=st.floats(0, 1))
def test_convex(spec, rho, a, b, t):
    fam = fam_of(spec[0], rho, spec[1])
    mid = fam.eval(1, t * a + (1 - t) * b)
    assert mid <= t * fam.eval(1, a) + (1 - t) * fam.eval(1, b) + 1e-9 / rho


@settings(max_examples=300, deadline=None)
@given(spec=specs, rho=rhos, r=reals)
def test_structure_below_k0_and_above_k1(spec, rho, r):
    fam = fam_of(spec[0], rho, spec[1])
    k0, k1, j = fam.k0[0], fam.k1[0], fam.j[0]
    assert k0 <= k1
    assert k1 + j >= -1e-15
    if r <= k0:
        assert fam.eval(0, r) == 0.0
    if r >= k1:
        assert fam.eval(0, r) == pytest.approx((r + j) / rho, rel=1e-9, abs=1e-9)


@settings(max_examples=300, deadline=None)
@given(spec=specs, rho=rhos, r=reals, h=st.floats(-2, 2))
def test_directional_derivative_bounds_and_quotient(spec, rho, r, h):
    fam = fam_of(spec[0], rho, spec[1])
    d = fam.dir_deriv_at(0, r, h)
    assert abs(d) <= abs(h) / rho * (1 + 1e-12)
    # one-sided difference quotient, away from the kink of the nonsmooth kinds
    t = 1e-7
    if not fam.smooth:
        assume(abs(r - fam.k0[0]) > 2 * t * abs(h))
    q = (fam.eval(0, r + t * h) - fam.eval(0, r)) / t
    assert d == pytest.approx(q, abs=1e-4 * (1 + abs(h)) / rho)


@settings(max_examples=200, deadline=None)
@given(spec=specs, rho=rhos, a=reals, b=reals)
def test_convexity_gradient_inequality(spec, rho, a, b):
    fam = fam_of(spec[0], rho, spec[1])
    # lambda(b) >= lambda(a) + lambda'(a)(b - a) for convex lambda (any subgradient)
    lhs = fam.eval(0, b)
    rhs = fam.eval(0, a) + fam.newton_slope(0, a) * (b - a)
    assert lhs >= rhs - 1e-9 * (1 + abs(b - a)) / rho


@settings(max_examples=100, deadline=None)
@given(spec=specs, rho=rhos, r=reals)
def test_slope_in_unit_interval(spec, rho, r):
    fam = fam_of(spec[0], rho, spec[1])
    s = fam.newton_slope(0, r) * rho
    assert -1e-12 <= s <= 1 + 1e-12


@pytest.mark.parametrize("kind,reg", SPECS)
def test_all_shipped_families_satisfy_assumptions(kind, reg):
    rep = verify_assumptions(fam_of(kind, 1.0, reg), (1.0, 0.25, 4.0**-4))
    assert rep.passed, rep.failed()


def test_family_arrays_are_read_only():
    fam = fam_of("sc", 0.1, "local")
    for a in (fam.k0, fam.k1, fam.j, fam.shift, fam.lambda_bar):
        with pytest.raises(ValueError):
            a[0] = 1.0


def test_kinds_catalogue():
    assert FAMILY_KINDS == ("m", "c", "sm", "sc", "sc_tilde")
    assert set(REGULARIZATION_KINDS) == {"huber_global", "kw_cubic", "local", "kw_quadratic"}
