"""Semismooth Newton solver for ``K u + M Lambda(u - psi) = F``."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sps
import scipy.sparse.linalg as spla

from .grid import DiscreteField, DualVector, EllipticOperators, _same_grid, norm
from .penalty import PenaltyFamily

log = logging.getLogger(__name__)

EPS = np.finfo(float).eps
# cold solves below this rho are reached by continuation from it
CONTINUATION_START = 1e-2
CONTINUATION_FACTOR = 1e-2


class PenaltySolverError(RuntimeError):
    def __init__(self, msg, last=None):
        super().__init__(msg)
        self.last = last


@dataclass(frozen=True, eq=False)
class PenalizedSolution:
    u_rho: DiscreteField
    residual_norm: float
    newton_iters: int
    kink_nodes: np.ndarray
    gateaux_flag: bool
    family: PenaltyFamily
    psi: DiscreteField
    f_rho: DualVector
    xi_rho: DualVector  # f_rho + Delta u_rho, i.e. M Lambda(u_rho - psi) up to the residual
    tolerance: float = 0.0

    @property
    def gap(self) -> np.ndarray:
        """Nodal ``u_rho - psi``."""
        return self.u_rho.values - self.psi.values


def kink_tolerance(psi: DiscreteField) -> float:
    return 1e-9 * (1.0 + float(np.max(np.abs(psi.values))))


def residual(ops: EllipticOperators, fam: PenaltyFamily, psi: DiscreteField, F: DualVector,
             u: np.ndarray) -> np.ndarray:
    return ops.K @ u + ops.mass * fam.value(u - psi.values) - F.values


def _hm1(ops, r):
    return float(np.sqrt(max(r @ ops.solve(r), 0.0)))


def _noise_floor(ops, fam, psi, u, F_norm):
    # roundoff in forming u - psi is amplified by the penalty slope
    s = fam.slope(u - psi.values)
    pert = s * EPS * (np.abs(u) + np.abs(psi.values))
    l2 = np.sqrt(pert @ (ops.mass * pert))
    return 10.0 * ops.C_P * l2 + 10.0 * EPS * (_hm1(ops, ops.K @ u) + F_norm)


def _newton(ops, fam, psi, F, u, tol, max_iter, F_norm):
    mass = ops.mass
    target = tol * (1.0 + F_norm)
    iters = 0
    stalls = 0
    r = residual(ops, fam, psi, F, u)
    rn = _hm1(ops, r)
    while True:
        if rn <= max(target, _noise_floor(ops, fam, psi, u, F_norm)):
            return u, rn, iters
        if iters >= max_iter:
            raise PenaltySolverError(
                f"semismooth Newton did not converge in {max_iter} steps (residual {rn:.3e})",
                last=u,
            )
        iters += 1
        J = (ops.K + sps.diags(mass * fam.slope(u - psi.values))).tocsc()
        du = spla.spsolve(J, -r)
        t = 1.0
        accepted = False
        for _ in range(40):
            u_try = u + t * du
            r_try = residual(ops, fam, psi, F, u_try)
            rn_try = _hm1(ops, r_try)
            if rn_try < rn:
                accepted = True
                break
            t *= 0.5
        if accepted:
            u, r, rn = u_try, r_try, rn_try
            continue
        stalls += 1
        log.debug("Newton stagnated at rho=%g (residual %.3e); Richardson fallback", fam.rho, rn)
        u = _richardson(ops, fam, psi, F, u, steps=100)
        r = residual(ops, fam, psi, F, u)
        rn = _hm1(ops, r)
        if stalls > 3:
            raise PenaltySolverError(f"solver stagnated at residual {rn:.3e}", last=u)


def _richardson(ops, fam, psi, F, u, steps):
    # I + K^{-1} M Lambda is 1-strongly monotone and (1 + C_P^2/rho)-Lipschitz in the K inner product
    L = 1.0 + ops.C_P**2 / fam.rho
    omega = 1.0 / L**2
    for _ in range(steps):
        u = u - omega * ops.solve(residual(ops, fam, psi, F, u))
    return u


def solve_penalized(ops: EllipticOperators, fam: PenaltyFamily, psi: DiscreteField, f_rho: DualVector,
                    tol: float = 1e-10, u0=None, max_iter: int = 50) -> PenalizedSolution:
    """Solve the penalized equation by globalized semismooth Newton.

    Without ``u0`` the iteration starts from the unconstrained Poisson
    solution; for ``rho < 1e-2`` it is first run at ``1e-2, 1e-4, ...`` and
    warm-started down to ``rho`` (``newton_iters`` counts all stages).
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    _same_grid(ops, psi)
    _same_grid(ops, f_rho)
    if fam.grid != ops.grid:
        raise ValueError("penalty family lives on a different grid")
    F_norm = norm(ops, f_rho, "Hminus1")
    total = 0
    if u0 is None:
        u = ops.solve(f_rho.values)
        stage = CONTINUATION_START
        while stage > fam.rho:
            u, _, it = _newton(ops, fam.with_rho(stage), psi, f_rho, u, tol, max_iter, F_norm)
            total += it
            stage *= CONTINUATION_FACTOR
    else:
        u = np.array(u0.values if isinstance(u0, DiscreteField) else u0, dtype=float)
    u, rn, it = _newton(ops, fam, psi, f_rho, u, tol, max_iter, F_norm)
    total += it

    return _package(ops, fam, psi, f_rho, u, rn, total, tol * (1.0 + F_norm))


def _package(ops, fam, psi, f_rho, u, rn, iters, tol_abs):
    if fam.smooth:
        kinks = np.zeros(0, dtype=int)
    else:
        kinks = np.flatnonzero(np.abs(u - psi.values - fam.k0) <= kink_tolerance(psi))
    xi = DualVector(ops.grid, f_rho.values - ops.K @ u)
    return PenalizedSolution(
        DiscreteField(ops.grid, u), rn, iters, kinks, kinks.size == 0, fam, psi, f_rho, xi, tol_abs,
    )


def lipschitz_probe(ops: EllipticOperators, fam: PenaltyFamily, psi: DiscreteField, f: DualVector,
                    g: DualVector, tol: float = 1e-12) -> float:
    """``||S(f) - S(g)||_H10 / ||f - g||_H-1``; must not exceed 1."""
    den = norm(ops, f - g, "Hminus1")
    if den == 0.0:
        return 0.0
    uf = solve_penalized(ops, fam, psi, f, tol=tol).u_rho
    ug = solve_penalized(ops, fam, psi, g, tol=tol).u_rho
    return norm(ops, uf - ug, "H10") / den


def a_priori_bound(ops: EllipticOperators, fam: PenaltyFamily, psi: DiscreteField, f: DualVector,
                   C: float) -> float:
    """Right-hand side of ``||S(f)||_H10 <= ||f||_H-1 + 2||min(0, psi)||_H10 + C_P C``."""
    psi0 = DiscreteField(ops.grid, np.minimum(psi.values, 0.0))
    return norm(ops, f, "Hminus1") + 2.0 * norm(ops, psi0, "H10") + ops.C_P * C


def feasibility_bound(ops: EllipticOperators, psi: DiscreteField, f: DualVector, rho: float, C: float) -> float:
    """``(sqrt(rho)/2) (||f + Delta psi||_H-1 + C_P C)``, a bound for ``||(u_rho - psi)^+||_L2``."""
    g = f - ops.neg_laplacian(psi)
    return 0.5 * np.sqrt(rho) * (norm(ops, g, "Hminus1") + ops.C_P * C)


def multiplier_bound(ops: EllipticOperators, psi: DiscreteField, f: DualVector, rho: float, C: float) -> float:
    """Bound for ``||Lambda(u_rho - psi)||_L2``."""
    g = f - ops.neg_laplacian(psi)
    return (norm(ops, g, "Hminus1") + ops.C_P * C) / (2.0 * np.sqrt(rho)) + C


def l2_feasibility_bound(ops: EllipticOperators, fam: PenaltyFamily, psi: DiscreteField, f: DualVector) -> float:
    """``rho ||f + Delta psi + k1/rho||_L2`` for L^2-regular data."""
    g = (f - ops.neg_laplacian(psi)).values / ops.mass + fam.k1 / fam.rho
    return fam.rho * float(np.sqrt(g @ (ops.mass * g)))
