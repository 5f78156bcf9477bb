"""Derivatives of the penalized solution map and the weighted operators ``L_mu``.

A discrete capacitary measure is a nodal weight vector whose entries may be
``+inf``; infinite nodes are eliminated from the system, which pins the
solution to zero there.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sps
import scipy.sparse.linalg as spla

from .grid import DiscreteField, DualVector, EllipticOperators, _same_grid
from .penalty_solver import PenalizedSolution


class NotGateaux(ValueError):
    """The nonsmooth penalty sits exactly on its kink at some nodes."""

    def __init__(self, nodes):
        nodes = np.asarray(nodes)
        shown = ", ".join(str(int(i)) for i in nodes[:10])
        more = "" if nodes.size <= 10 else f", ... ({nodes.size} total)"
        super().__init__(f"solution map not Gateaux differentiable here; kink at nodes [{shown}{more}]")
        self.nodes = nodes


@dataclass(frozen=True, eq=False)
class WeightMeasure:
    weights: np.ndarray

    def __post_init__(self):
        w = np.array(self.weights, dtype=float).reshape(-1)
        if np.any(np.isnan(w)) or np.any(w < 0):
            raise ValueError("weights must be nonnegative (use inf for the hard constraint)")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @property
    def infinite(self) -> np.ndarray:
        return np.isinf(self.weights)

    @classmethod
    def zero(cls, N):
        return cls(np.zeros(N))

    @classmethod
    def from_sets(cls, N, inf_mask, finite=None):
        w = np.zeros(N) if finite is None else np.array(finite, dtype=float)
        w[np.asarray(inf_mask, dtype=bool)] = np.inf
        return cls(w)


def _require_gateaux(sol: PenalizedSolution):
    if not sol.family.smooth and not sol.gateaux_flag:
        raise NotGateaux(sol.kink_nodes)


def extract_measure(fam, sol: PenalizedSolution, psi: DiscreteField) -> WeightMeasure:
    """Nodal density ``lambda_rho'(x, u_rho - psi)``, all finite in ``[0, 1/rho]``."""
    _require_gateaux(sol)
    return WeightMeasure(fam.slope(sol.u_rho.values - psi.values))


def solve_weighted(ops: EllipticOperators, mu: WeightMeasure, d: DualVector) -> DiscreteField:
    """Discrete ``L_mu d``: solve ``(K + M diag(mu)) y = d`` with ``y = 0`` where ``mu = inf``."""
    _same_grid(ops, d)
    w = mu.weights
    if w.shape != (ops.grid.N,):
        raise ValueError("measure and grid disagree in size")
    inf = np.isinf(w)
    y = np.zeros(ops.grid.N)
    free = ~inf
    if not np.any(free):
        return DiscreteField(ops.grid, y)
    if not np.any(inf) and not np.any(w):
        return DiscreteField(ops.grid, ops.solve(d.values))
    A = ops.K + sps.diags(ops.mass * np.where(inf, 0.0, w))
    A = A.tocsr()[free][:, free].tocsc()
    y[free] = spla.spsolve(A, d.values[free]) if A.shape[0] > 1 else d.values[free] / A.toarray()[0, 0]
    return DiscreteField(ops.grid, y)


def solve_derivative(ops: EllipticOperators, fam, sol: PenalizedSolution, psi: DiscreteField,
                     d: DualVector) -> DiscreteField:
    """``S_rho'(f_rho) d`` from the linearized equation ``(K + M diag(w)) alpha = d``."""
    return solve_weighted(ops, extract_measure(fam, sol, psi), d)


class DerivativeOperator:
    """``S_rho'(f_rho)`` with a single factorization reused across directions."""

    def __init__(self, ops: EllipticOperators, mu: WeightMeasure):
        self.ops = ops
        self.mu = mu
        w = mu.weights
        self.free = ~np.isinf(w)
        A = ops.K + sps.diags(ops.mass * np.where(self.free, w, 0.0))
        A = A.tocsr()[self.free][:, self.free].tocsc()
        self._lu = spla.splu(A) if A.shape[0] else None

    @classmethod
    def from_solution(cls, ops, fam, sol, psi):
        return cls(ops, extract_measure(fam, sol, psi))

    def __call__(self, d: DualVector) -> DiscreteField:
        y = np.zeros(self.ops.grid.N)
        if self._lu is not None:
            y[self.free] = self._lu.solve(np.asarray(d.values[self.free], dtype=float))
        return DiscreteField(self.ops.grid, y)
