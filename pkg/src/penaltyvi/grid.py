"""Uniform tensor meshes with P1/lumped-mass operators for the Dirichlet Laplacian.

Nodal unknowns live on interior nodes only; the homogeneous Dirichlet trace is
implicit.  Obstacles that do not vanish on the boundary carry their boundary
trace separately (``DiscreteField.boundary``) so that ``-Delta psi`` can be
formed including the boundary columns of the stiffness matrix.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable

import numpy as np
import scipy.sparse as sps
import scipy.sparse.linalg as spla

NORM_KINDS = ("H10", "L2", "Hminus1")


@dataclass(frozen=True)
class Grid:
    """Uniform mesh of an interval or rectangle.

    ``extent`` is ``(a, b)`` in 1D and ``(a, b, c, d)`` for the rectangle
    ``(a, b) x (c, d)`` in 2D.  Interior nodes are numbered lexicographically
    with x running fastest.
    """

    dim: int
    extent: tuple[float, ...]
    n_interior: int

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise ValueError(f"dim must be 1 or 2, got {self.dim}")
        if len(self.extent) != 2 * self.dim:
            raise ValueError(f"extent needs {2 * self.dim} numbers, got {len(self.extent)}")
        if int(self.n_interior) != self.n_interior or self.n_interior < 1:
            raise ValueError(f"n_interior must be a positive integer, got {self.n_interior}")
        for lo, hi in zip(self.extent[::2], self.extent[1::2]):
            if not hi > lo:
                raise ValueError(f"degenerate extent ({lo}, {hi})")
        object.__setattr__(self, "extent", tuple(float(e) for e in self.extent))

    @property
    def spacing(self) -> tuple[float, ...]:
        n1 = self.n_interior + 1
        return tuple((hi - lo) / n1 for lo, hi in zip(self.extent[::2], self.extent[1::2]))

    @property
    def h(self) -> float:
        return self.spacing[0]

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    @property
    def N(self) -> int:
        return self.n_interior**self.dim

    @property
    def volume(self) -> float:
        return float(np.prod([hi - lo for lo, hi in zip(self.extent[::2], self.extent[1::2])]))

    def _axes(self, full: bool) -> list[np.ndarray]:
        n = self.n_interior
        axes = []
        for (lo, hi), hk in zip(zip(self.extent[::2], self.extent[1::2]), self.spacing):
            k = np.arange(0, n + 2) if full else np.arange(1, n + 1)
            axes.append(lo + k * hk)
        return axes

    def coords(self) -> tuple[np.ndarray, ...]:
        """Coordinates of the interior nodes, one flat array per dimension."""
        axes = self._axes(full=False)
        if self.dim == 1:
            return (axes[0],)
        X, Y = np.meshgrid(axes[0], axes[1], indexing="xy")
        return X.ravel(), Y.ravel()

    @cached_property
    def _full_index(self) -> tuple[np.ndarray, np.ndarray]:
        # positions of interior / boundary nodes inside the full (n+2)^dim lattice
        m = self.n_interior + 2
        if self.dim == 1:
            interior = np.zeros(m, dtype=bool)
            interior[1:-1] = True
        else:
            inner = np.zeros(m, dtype=bool)
            inner[1:-1] = True
            interior = np.logical_and.outer(inner, inner).ravel()
        return np.flatnonzero(interior), np.flatnonzero(~interior)

    def boundary_coords(self) -> tuple[np.ndarray, ...]:
        """Coordinates of the boundary nodes in the order used for traces."""
        axes = self._axes(full=True)
        _, bnd = self._full_index
        if self.dim == 1:
            return (axes[0][bnd],)
        X, Y = np.meshgrid(axes[0], axes[1], indexing="xy")
        return X.ravel()[bnd], Y.ravel()[bnd]

    def field(self, values, boundary=None) -> DiscreteField:
        return DiscreteField(self, values, boundary)

    def dual(self, values) -> DualVector:
        return DualVector(self, values)

    def interpolate(self, func: Callable[..., np.ndarray], with_trace: bool = True) -> DiscreteField:
        """Nodal interpolant of ``func``; keeps its boundary trace unless it vanishes."""
        vals = np.broadcast_to(np.asarray(func(*self.coords()), dtype=float), (self.N,))
        bnd = None
        if with_trace:
            bvals = np.broadcast_to(
                np.asarray(func(*self.boundary_coords()), dtype=float),
                (len(self._full_index[1]),),
            )
            if np.any(bvals != 0.0):
                bnd = bvals
        return DiscreteField(self, vals, bnd)

    def constant(self, c: float, with_trace: bool = True) -> DiscreteField:
        return self.interpolate(lambda *x: np.full_like(x[0], c), with_trace=with_trace)


@dataclass(frozen=True, eq=False)
class DiscreteField:
    """Nodal values of a primal function; ``boundary`` is its trace (None means zero)."""

    grid: Grid
    values: np.ndarray
    boundary: np.ndarray | None = None

    def __post_init__(self):
        vals = np.array(self.values, dtype=float).reshape(-1)
        if vals.shape != (self.grid.N,):
            raise ValueError(f"field has {vals.size} values, grid has {self.grid.N} nodes")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)
        if self.boundary is not None:
            b = np.array(self.boundary, dtype=float).reshape(-1)
            b.setflags(write=False)
            object.__setattr__(self, "boundary", b)

    @property
    def in_h10(self) -> bool:
        return self.boundary is None or not np.any(self.boundary)

    def _combine(self, other, op):
        if isinstance(other, DiscreteField):
            _same_grid(self, other)
            if self.boundary is None and other.boundary is None:
                bnd = None
            else:
                nb = len(self.grid._full_index[1])
                b1 = self.boundary if self.boundary is not None else np.zeros(nb)
                b2 = other.boundary if other.boundary is not None else np.zeros(nb)
                bnd = op(b1, b2)
            return DiscreteField(self.grid, op(self.values, other.values), bnd)
        return NotImplemented

    def __add__(self, other):
        return self._combine(other, np.add)

    def __sub__(self, other):
        return self._combine(other, np.subtract)

    def __neg__(self):
        bnd = None if self.boundary is None else -self.boundary
        return DiscreteField(self.grid, -self.values, bnd)

    def __mul__(self, c):
        if not np.isscalar(c):
            return NotImplemented
        bnd = None if self.boundary is None else c * self.boundary
        return DiscreteField(self.grid, c * self.values, bnd)

    __rmul__ = __mul__

    def positive_part(self) -> DiscreteField:
        return DiscreteField(self.grid, np.maximum(self.values, 0.0))

    def negative_part(self) -> DiscreteField:
        return DiscreteField(self.grid, np.maximum(-self.values, 0.0))


@dataclass(frozen=True, eq=False)
class DualVector:
    """Load functional stored by its pairings with the nodal basis functions."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        vals = np.array(self.values, dtype=float).reshape(-1)
        if vals.shape != (self.grid.N,):
            raise ValueError(f"dual vector has {vals.size} values, grid has {self.grid.N} nodes")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    def pair(self, u: DiscreteField) -> float:
        _same_grid(self, u)
        return float(self.values @ u.values)

    def __add__(self, other):
        if not isinstance(other, DualVector):
            return NotImplemented
        _same_grid(self, other)
        return DualVector(self.grid, self.values + other.values)

    def __sub__(self, other):
        if not isinstance(other, DualVector):
            return NotImplemented
        _same_grid(self, other)
        return DualVector(self.grid, self.values - other.values)

    def __neg__(self):
        return DualVector(self.grid, -self.values)

    def __mul__(self, c):
        if not np.isscalar(c):
            return NotImplemented
        return DualVector(self.grid, c * self.values)

    __rmul__ = __mul__


def _same_grid(a, b):
    if a.grid != b.grid:
        raise ValueError("objects live on different grids")


def _second_difference(m: int) -> sps.csr_matrix:
    e = np.ones(m)
    return sps.diags([-e[:-1], 2 * e, -e[:-1]], [-1, 0, 1], format="csr")


@dataclass(frozen=True, eq=False)
class EllipticOperators:
    """Stiffness ``K``, lumped mass ``M`` and the discrete Poincare constant.

    Immutable after assembly.  The factorization of ``K`` is computed once
    and shared by ``solve``, the ``Hminus1`` norm and the Poincare estimate.
    """

    grid: Grid
    K: sps.csc_matrix
    mass: np.ndarray
    K_boundary: sps.csr_matrix  # interior rows, boundary columns of the full stiffness
    C_P: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "C_P", _poincare_constant(self))

    @property
    def M(self) -> sps.dia_matrix:
        return sps.diags(self.mass)

    @cached_property
    def _lu(self):
        return spla.splu(self.K)

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        """Apply ``K^{-1}`` to a raw nodal array."""
        x = self._lu.solve(np.asarray(rhs, dtype=float))
        if not np.all(np.isfinite(x)):
            raise FloatingPointError("stiffness factorization produced non-finite values")
        return x

    def neg_laplacian(self, u: DiscreteField) -> DualVector:
        """``-Delta u`` as a functional on the interior test functions."""
        vals = self.K @ u.values
        if u.boundary is not None:
            vals = vals + self.K_boundary @ u.boundary
        return DualVector(self.grid, vals)

    def load(self, density) -> DualVector:
        """Functional of an L^2 density given by nodal values (lumped quadrature)."""
        if isinstance(density, DiscreteField):
            density = density.values
        return DualVector(self.grid, self.mass * np.broadcast_to(density, (self.grid.N,)))

    def density(self, F: DualVector) -> DiscreteField:
        """Riesz representative in the lumped L^2 inner product (inverse of ``load``)."""
        return DiscreteField(self.grid, F.values / self.mass)


def build_grid(dim: int, extent, n_interior: int) -> tuple[Grid, EllipticOperators]:
    grid = Grid(dim, tuple(extent), n_interior)
    n = grid.n_interior
    if dim == 1:
        (hx,) = grid.spacing
        full = _second_difference(n + 2) / hx
        vol = hx
    else:
        hx, hy = grid.spacing
        Tx = _second_difference(n + 2)
        Ix = sps.identity(n + 2, format="csr")
        # P1 on right triangles: diagonal couplings cancel, leaving the 5-point stencil
        full = (hy / hx) * sps.kron(Ix, Tx) + (hx / hy) * sps.kron(Tx, Ix)
        full = full.tocsr()
        vol = hx * hy
    interior, boundary = grid._full_index
    K = full[interior][:, interior].tocsc()
    K_b = full[interior][:, boundary].tocsr()
    mass = np.full(grid.N, vol)
    mass.setflags(write=False)
    return grid, EllipticOperators(grid, K, mass, K_b)


def _poincare_constant(ops: EllipticOperators, tol: float = 1e-8, max_iter: int = 500) -> float:
    # inverse power iteration for the smallest eigenvalue of M^{-1} K
    x = np.ones(ops.grid.N)
    lam_old = np.inf
    for _ in range(max_iter):
        y = ops.solve(ops.mass * x)
        y /= np.sqrt(y @ (ops.mass * y))
        lam = float(y @ (ops.K @ y))
        x = y
        if abs(lam - lam_old) <= tol * lam:
            break
        lam_old = lam
    return 1.0 / np.sqrt(lam)


def solve_poisson(ops: EllipticOperators, F: DualVector) -> DiscreteField:
    _same_grid(ops, F)
    return DiscreteField(ops.grid, ops.solve(F.values))


def norm(ops: EllipticOperators, x, kind: str) -> float:
    """``H10``/``L2`` norms of a field or the dual ``Hminus1`` norm of a load."""
    if kind not in NORM_KINDS:
        raise ValueError(f"unknown norm kind {kind!r}; expected one of {NORM_KINDS}")
    if kind == "Hminus1":
        if not isinstance(x, DualVector):
            raise TypeError("Hminus1 norm takes a DualVector")
        _same_grid(ops, x)
        v = x.values
        return float(np.sqrt(max(v @ ops.solve(v), 0.0)))
    if not isinstance(x, DiscreteField):
        raise TypeError(f"{kind} norm takes a DiscreteField")
    _same_grid(ops, x)
    v = x.values
    if kind == "H10":
        return float(np.sqrt(max(v @ (ops.K @ v), 0.0)))
    return float(np.sqrt(v @ (ops.mass * v)))
