"""Exact solvers for the discrete obstacle problem ``u <= psi``.

The discrete problem is the complementarity system

    xi = F - K u >= 0,   u <= psi,   xi * (psi - u) = 0,

where ``xi`` is the nodal multiplier (the functional ``f + Delta u``).
"""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse.linalg as spla

from .grid import DiscreteField, DualVector, EllipticOperators, _same_grid

log = logging.getLogger(__name__)

BRUTEFORCE_MAX_N = 14


class VISolverError(RuntimeError):
    def __init__(self, msg, last=None):
        super().__init__(msg)
        self.last = last


@dataclass(frozen=True, eq=False)
class VISolution:
    u: DiscreteField
    xi: DualVector
    psi: DiscreteField
    active: np.ndarray
    strictly_active: np.ndarray
    inactive: np.ndarray
    tol_act: float
    tol_xi: float
    iterations: int = 0


def default_tolerances(psi: DiscreteField, F: DualVector) -> tuple[float, float]:
    tol_act = 1e-10 * float(np.max(np.abs(psi.values))) + 1e-14
    tol_xi = 1e-10 * float(np.max(np.abs(F.values))) + 1e-14
    return tol_act, tol_xi


def classify_sets(sol: VISolution, tol_act: float, tol_xi: float):
    """Return boolean masks ``(I, A, A_s)``: inactive, active, strictly active."""
    if not (tol_act > 0 and tol_xi > 0):
        raise ValueError("tolerances must be positive")
    A = np.abs(sol.psi.values - sol.u.values) <= tol_act
    A_s = A & (sol.xi.values > tol_xi)
    return ~A, A, A_s


def _finish(ops, psi, F, u, iterations) -> VISolution:
    grid = ops.grid
    u_field = DiscreteField(grid, u)
    xi = DualVector(grid, F.values - ops.K @ u)
    tol_act, tol_xi = default_tolerances(psi, F)
    stub = VISolution(u_field, xi, psi, None, None, None, tol_act, tol_xi)
    I, A, A_s = classify_sets(stub, tol_act, tol_xi)
    return VISolution(u_field, xi, psi, A, A_s, I, tol_act, tol_xi, iterations)


def _reduced_solve(ops, psi_v, F_v, active):
    u = np.where(active, psi_v, 0.0)
    free = ~active
    if np.any(free):
        K = ops.K
        rhs = F_v[free] - K[free][:, active] @ psi_v[active]
        Kff = K[free][:, free].tocsc()
        u[free] = spla.spsolve(Kff, rhs) if Kff.shape[0] > 1 else rhs / Kff.toarray()[0, 0]
    return u


def solve_pdas(ops: EllipticOperators, psi: DiscreteField, f: DualVector, max_iter: int = 200) -> VISolution:
    """Primal-dual active set iteration; stops when the active set repeats."""
    _same_grid(ops, psi)
    _same_grid(ops, f)
    psi_v, F_v = psi.values, f.values
    c = ops.K.diagonal()
    u = ops.solve(F_v)
    xi = np.zeros_like(u)
    active = None
    for it in range(1, max_iter + 1):
        new = xi + c * (u - psi_v) > 0
        if active is not None and np.array_equal(new, active):
            log.debug("PDAS converged after %d iterations, |A| = %d", it - 1, int(active.sum()))
            return _finish(ops, psi, f, u, it - 1)
        active = new
        u = _reduced_solve(ops, psi_v, F_v, active)
        xi = np.where(active, F_v - ops.K @ u, 0.0)
    raise VISolverError(f"PDAS did not converge in {max_iter} iterations", last=_finish(ops, psi, f, u, max_iter))


def solve_bruteforce(ops: EllipticOperators, psi: DiscreteField, f: DualVector) -> VISolution:
    """Enumerate every candidate active set; independent oracle for small ``N``."""
    N = ops.grid.N
    if N > BRUTEFORCE_MAX_N:
        raise ValueError(f"brute force limited to N <= {BRUTEFORCE_MAX_N}, got {N}")
    psi_v, F_v = psi.values, f.values
    K = ops.K.toarray()
    masks = np.array(list(itertools.product([False, True], repeat=N)), dtype=bool)
    # rows of active nodes become identity rows pinning u_i = psi_i
    systems = np.where(masks[:, :, None], np.eye(N)[None], K[None])
    rhs = np.where(masks, psi_v[None], F_v[None])
    U = np.linalg.solve(systems, rhs[..., None])[..., 0]
    Xi = F_v[None] - U @ K.T
    scale_u = 1e-11 * (1.0 + np.max(np.abs(psi_v)))
    scale_xi = 1e-11 * (1.0 + np.max(np.abs(F_v)))
    ok = np.all(U <= psi_v + scale_u, axis=1) & np.all(np.where(masks, Xi >= -scale_xi, True), axis=1)
    hits = np.flatnonzero(ok)
    if hits.size == 0:
        raise VISolverError("no complementary active set found")
    u = U[hits[0]]
    if hits.size > 1 and np.max(np.abs(U[hits] - u)) > 1e-8 * (1 + np.max(np.abs(u))):
        raise VISolverError("multiple distinct complementary solutions found")
    return _finish(ops, psi, f, u, int(masks.shape[0]))
