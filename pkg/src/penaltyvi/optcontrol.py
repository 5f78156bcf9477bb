"""Optimal control of the obstacle problem through the penalization path.

The control is an L^2 density ``f`` in a nodal box ``[lo, up]``; the state is
``y = S(M f)``.  For each ``rho`` of the path the smooth penalized problem is
solved by projected gradient descent (Barzilai-Borwein steps, Armijo
backtracking).  The proximal term of the regularized objective is anchored at
the incumbent, where its gradient vanishes, so it never biases the iteration.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sps
import scipy.sparse.linalg as spla

from .grid import DiscreteField, DualVector, EllipticOperators
from .penalty import PenaltyFamily
from .penalty_solver import PenalizedSolution, solve_penalized
from .sensitivity import DerivativeOperator, WeightMeasure
from .vi_ref import VISolution

log = logging.getLogger(__name__)


class ControlSolverError(RuntimeError):
    def __init__(self, msg, incumbent=None):
        super().__init__(msg)
        self.incumbent = incumbent


@dataclass(frozen=True, eq=False)
class ControlProblem:
    """``min 1/2 ||y - y_d||^2 + nu/2 ||f||^2`` over ``lo <= f <= up`` with ``y = S(f)``."""

    ops: EllipticOperators
    psi: DiscreteField
    y_d: DiscreteField
    nu: float = 0.0
    lo: np.ndarray | float = -np.inf
    up: np.ndarray | float = np.inf

    def __post_init__(self):
        N = self.ops.grid.N
        lo = np.array(np.broadcast_to(np.asarray(self.lo, dtype=float), (N,)))
        up = np.array(np.broadcast_to(np.asarray(self.up, dtype=float), (N,)))
        if np.any(lo > up):
            raise ValueError("control bounds must satisfy lo <= up")
        if not self.nu >= 0:
            raise ValueError("nu must be nonnegative")
        for a in (lo, up):
            a.setflags(write=False)
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "up", up)

    def project(self, f: np.ndarray) -> np.ndarray:
        return np.clip(f, self.lo, self.up)

    def l2(self, v: np.ndarray) -> float:
        return float(np.sqrt(v @ (self.ops.mass * v)))

    def objective(self, y: np.ndarray, f: np.ndarray) -> float:
        r = y - self.y_d.values
        return 0.5 * float(r @ (self.ops.mass * r)) + 0.5 * self.nu * float(f @ (self.ops.mass * f))


@dataclass(frozen=True, eq=False)
class GradientEval:
    value: float
    gradient: np.ndarray
    objective: float  # J without the prox term
    state: PenalizedSolution
    adjoint: np.ndarray


def _require_smooth(fam: PenaltyFamily):
    if not fam.smooth:
        raise ValueError(f"the control path needs a smooth penalty (sm, sc, sc_tilde), got {fam.kind!r}")


def evaluate(prob: ControlProblem, fam: PenaltyFamily, f: np.ndarray, f_anchor: np.ndarray,
             u0=None, tol: float = 1e-12) -> GradientEval:
    _require_smooth(fam)
    ops = prob.ops
    f = np.asarray(f, dtype=float)
    sol = solve_penalized(ops, fam, prob.psi, ops.load(f), tol=tol, u0=u0)
    y = sol.u_rho.values
    w = fam.slope(sol.gap)
    adj = DerivativeOperator(ops, WeightMeasure(w))
    p = adj(DualVector(ops.grid, ops.mass * (y - prob.y_d.values))).values
    J = prob.objective(y, f)
    dev = f - f_anchor
    value = J + 0.5 * float(dev @ (ops.mass * dev))
    grad = p + prob.nu * f + dev
    return GradientEval(value, grad, J, sol, p)


def reduced_gradient(prob: ControlProblem, fam: PenaltyFamily, rho: float, f, f_anchor):
    """Value and L^2 gradient of ``J(S_rho(f), f) + 1/2 ||f - f_anchor||^2``."""
    ev = evaluate(prob, fam.with_rho(rho), np.asarray(f, dtype=float), np.asarray(f_anchor, dtype=float))
    return ev.value, ev.gradient


@dataclass
class StationarityCertificate:
    f_bar: DiscreteField
    y_bar: DiscreteField
    p: DiscreteField
    multiplier_residual: float
    rho: float
    objective: float
    path: list[dict] = field(default_factory=list)
    c_stationarity: dict | None = None

    def to_dict(self) -> dict:
        return {
            "rho": self.rho,
            "objective": self.objective,
            "multiplier_residual": self.multiplier_residual,
            "f_bar": self.f_bar.values.tolist(),
            "y_bar": self.y_bar.values.tolist(),
            "p": self.p.values.tolist(),
            "c_stationarity": self.c_stationarity,
        }


def multiplier_residual(prob: ControlProblem, f: np.ndarray, p: np.ndarray) -> float:
    """``||f - P(f - (p + nu f))||_L2``, zero iff ``0 in p + nu f + N(f)``."""
    return prob.l2(f - prob.project(f - (p + prob.nu * f)))


PATH_COLUMNS = ("rho", "inner_iters", "objective", "projected_gradient", "multiplier_residual",
                "control_change", "newton_iters")


def _inner_solve(prob, fam, f, u0, tol_inner, max_inner):
    ops = prob.ops
    mass = ops.mass
    ev = evaluate(prob, fam, f, f, u0=u0)
    step = 1.0
    g_prev = f_prev = None
    newton = ev.state.newton_iters
    for it in range(max_inner + 1):
        # with the anchor at the incumbent the prox gradient vanishes
        g = ev.gradient
        pg = prob.l2(f - prob.project(f - g))
        if pg <= tol_inner:
            return f, ev, it, pg, newton
        if it == max_inner:
            break
        if g_prev is not None:
            s, yv = f - f_prev, g - g_prev
            sy = float(s @ (mass * yv))
            if sy > 0:
                step = float(np.clip(float(s @ (mass * s)) / sy, 1e-8, 1e8))
        phi0 = ev.objective
        noise = 100 * np.finfo(float).eps * max(1.0, abs(phi0))
        accepted = False
        for _ in range(60):
            trial = prob.project(f - step * g)
            d = trial - f
            dd = float(d @ (mass * d))
            if dd / step <= noise:
                # the decrease we could certify is below roundoff in J
                log.debug("rho=%g: line search at roundoff level, projected gradient %.3e", fam.rho, pg)
                return f, ev, it, pg, newton
            ev_t = evaluate(prob, fam, trial, f, u0=ev.state.u_rho)
            newton += ev_t.state.newton_iters
            if ev_t.objective <= phi0 - 1e-4 * dd / step:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            raise ControlSolverError(f"line search failed at rho={fam.rho:g} (projected gradient {pg:.3e})",
                                     incumbent=f)
        g_prev, f_prev = g, f
        f = trial
        ev = GradientEval(ev_t.objective, ev_t.adjoint + prob.nu * f, ev_t.objective, ev_t.state, ev_t.adjoint)
    raise ControlSolverError(
        f"projected gradient did not reach {tol_inner:.1e} in {max_inner} steps at rho={fam.rho:g} "
        f"(stalled at {pg:.3e})", incumbent=f)


def solve_oc_path(prob: ControlProblem, fam: PenaltyFamily, rho_schedule, f0, tol_inner: float = 1e-8,
                  max_inner: int = 2000) -> StationarityCertificate:
    """Follow the penalization path, warm-starting each ``rho`` from the previous control."""
    _require_smooth(fam)
    ops = prob.ops
    f = np.asarray(f0.values if isinstance(f0, DiscreteField) else f0, dtype=float)
    f = np.array(np.broadcast_to(f, (ops.grid.N,)))
    if np.any(f < prob.lo) or np.any(f > prob.up):
        raise ValueError("initial control must lie in the admissible box")
    rhos = np.asarray(rho_schedule, dtype=float)
    if rhos.size == 0 or np.any(rhos <= 0) or np.any(np.diff(rhos) >= 0):
        raise ValueError("rho_schedule must be positive and strictly decreasing")
    path = []
    u0 = None
    ev = None
    for rho in rhos:
        fam_r = fam.with_rho(float(rho))
        f_old = f
        f, ev, iters, pg, newton = _inner_solve(prob, fam_r, f, u0, tol_inner, max_inner)
        u0 = ev.state.u_rho
        path.append({
            "rho": float(rho),
            "inner_iters": iters,
            "objective": ev.objective,
            "projected_gradient": pg,
            "multiplier_residual": multiplier_residual(prob, f, ev.adjoint),
            "control_change": prob.l2(f - f_old),
            "newton_iters": newton,
        })
        log.info("rho=%g: %d steps, J=%.10g, residual %.2e", rho, iters, ev.objective, pg)
    grid = ops.grid
    return StationarityCertificate(
        DiscreteField(grid, f), ev.state.u_rho, DiscreteField(grid, ev.adjoint),
        path[-1]["multiplier_residual"], float(rhos[-1]), ev.objective, path,
    )


def check_c_stationarity(cert: StationarityCertificate, vi_sol: VISolution, prob: ControlProblem) -> dict:
    """Nodal checks of the limiting optimality system at the certificate.

    ``nu_hat = M(y - y_d) - K p`` is the discrete ``J_y + Delta p``.  The sign
    functional is the minimum of ``sum nu_hat_i p_i phi_i`` over nodal test
    fields with ``0 <= phi <= 1``.
    """
    ops = prob.ops
    p = cert.p.values
    nu_hat = ops.mass * (cert.y_bar.values - prob.y_d.values) - ops.K @ p
    I, A, A_s = vi_sol.inactive, vi_sol.active, vi_sol.strictly_active
    prod = nu_hat * p
    report = {
        "max_nu_I": float(np.max(np.abs(nu_hat[I]), initial=0.0)),
        "max_nu_A": float(np.max(np.abs(nu_hat[A]), initial=0.0)),
        "max_p_As": float(np.max(np.abs(p[A_s]), initial=0.0)),
        "sign_functional": float(np.sum(np.minimum(prod, 0.0))),
        "n_inactive": int(I.sum()),
        "n_active": int(A.sum()),
        "n_strictly_active": int(A_s.sum()),
    }
    cert.c_stationarity = report
    return report


def solve_unconstrained_qp(prob: ControlProblem) -> tuple[np.ndarray, np.ndarray]:
    """Direct KKT solve of the control problem without obstacle and box (reference oracle)."""
    ops = prob.ops
    N = ops.grid.N
    M = ops.M
    Z = sps.csr_matrix((N, N))
    kkt = sps.bmat([
        [M, Z, ops.K],
        [Z, prob.nu * M, -M],
        [ops.K, -M, Z],
    ], format="csc")
    rhs = np.concatenate([ops.mass * prob.y_d.values, np.zeros(N), np.zeros(N)])
    sol = spla.spsolve(kkt, rhs)
    return sol[N:2 * N], sol[:N]

