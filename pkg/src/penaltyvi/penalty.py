"""Penalty families ``lambda_rho(x, r)`` for the penalized obstacle problem.

Every family has the form ``lambda_rho(x, r) = m(r + s(x)) / rho`` where ``m``
is either the positive part (nonsmooth kinds ``m`` and ``c``) or a C^1
regularization of it, and the shift ``s`` is ``0`` or ``rho * lambda_bar``.
This gives the structural data

    lambda = 0                  for r <= k0(x)
    lambda = (r + j(x)) / rho   for r >= k1(x)

with ``k0 = theta - s``, ``k1 = Theta - s`` and ``j = s + l`` in terms of the
regularization parameters ``(theta, Theta, l)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .grid import EllipticOperators, DiscreteField, DualVector, Grid

FAMILY_KINDS = ("m", "c", "sm", "sc", "sc_tilde")
REGULARIZATION_KINDS = ("huber_global", "kw_cubic", "local", "kw_quadratic")
SMOOTH_KINDS = ("sm", "sc", "sc_tilde")
SHIFTED_KINDS = ("c", "sc", "sc_tilde")


@dataclass(frozen=True, eq=False)
class Regularization:
    """A C^1 smoothing ``m`` of ``max(0, r)`` with ``m = 0`` below ``theta``
    and ``m(r) = r + l`` above ``Theta``."""

    kind: str
    width: float
    theta: float
    Theta: float
    l: float
    value: Callable[[np.ndarray], np.ndarray] = field(repr=False)
    deriv: Callable[[np.ndarray], np.ndarray] = field(repr=False)

    def rescaled(self, rho: float) -> Regularization:
        """``r -> rho * m(r / rho)``, the form used by the ``sc_tilde`` penalty."""
        m, dm = self.value, self.deriv
        return Regularization(
            kind=f"{self.kind}~",
            width=rho * self.width,
            theta=rho * self.theta,
            Theta=rho * self.Theta,
            l=rho * self.l,
            value=lambda r: rho * m(np.asarray(r) / rho),
            deriv=lambda r: dm(np.asarray(r) / rho),
        )

    def formula(self) -> str:
        return _FORMULAS.get(self.kind.rstrip("~"), "custom")


def _huber(g):
    def m(r):
        r = np.asarray(r, dtype=float)
        return np.where(r <= 0, 0.0, np.where(r < g, r * r / (2 * g), r - g / 2))

    def dm(r):
        r = np.asarray(r, dtype=float)
        return np.clip(r / g, 0.0, 1.0)

    return m, dm, 0.0, g, -g / 2


def _kw_cubic(g):
    def m(r):
        r = np.asarray(r, dtype=float)
        mid = (r + g / 2) ** 3 * (1.5 * g - r) / (2 * g**3)
        return np.where(r <= -g / 2, 0.0, np.where(r < g / 2, mid, r))

    def dm(r):
        r = np.asarray(r, dtype=float)
        mid = 2 * (r + g / 2) ** 2 * (g - r) / g**3
        return np.where(r <= -g / 2, 0.0, np.where(r < g / 2, mid, 1.0))

    return m, dm, -g / 2, g / 2, 0.0


def _local(g):
    def m(r):
        r = np.asarray(r, dtype=float)
        return np.where(r <= -g, 0.0, np.where(r < g, (r + g) ** 2 / (4 * g), r))

    def dm(r):
        r = np.asarray(r, dtype=float)
        return np.clip((r + g) / (2 * g), 0.0, 1.0)

    return m, dm, -g, g, 0.0


def _kw_quadratic(g):
    def m(r):
        r = np.asarray(r, dtype=float)
        return np.where(r <= -g / 2, 0.0, np.where(r < g / 2, (r + g / 2) ** 2 / (2 * g), r))

    def dm(r):
        r = np.asarray(r, dtype=float)
        return np.clip((r + g / 2) / g, 0.0, 1.0)

    return m, dm, -g / 2, g / 2, 0.0


_BUILDERS = {
    "huber_global": _huber,
    "kw_cubic": _kw_cubic,
    "local": _local,
    "kw_quadratic": _kw_quadratic,
}

_FORMULAS = {
    "huber_global": "0 (r <= 0); r^2/(2g) (0 < r < g); r - g/2 (r >= g)",
    "kw_cubic": "0 (r <= -g/2); (r + g/2)^3 (3g/2 - r)/(2g^3) (|r| < g/2); r (r >= g/2)",
    "local": "0 (r <= -g); r^2/(4g) + r/2 + g/4 (|r| < g); r (r >= g)",
    "kw_quadratic": "0 (r <= -g/2); (r + g/2)^2/(2g) (|r| < g/2); r (r >= g/2)",
    "max": "max(0, r)",
}


def make_regularization(kind: str, width: float) -> Regularization:
    if kind not in _BUILDERS:
        raise ValueError(f"unknown regularization {kind!r}; expected one of {REGULARIZATION_KINDS}")
    if not width > 0:
        raise ValueError(f"regularization width must be positive, got {width}")
    m, dm, theta, Theta, l = _BUILDERS[kind](float(width))
    return Regularization(kind, float(width), theta, Theta, l, m, dm)


def custom_regularization(value, deriv, theta, Theta, l, width=1.0, kind="custom") -> Regularization:
    """Wrap user-supplied ``m``/``m'`` with claimed structural parameters (not checked here)."""
    return Regularization(kind, float(width), float(theta), float(Theta), float(l), value, deriv)


def _positive_part(r):
    return np.maximum(np.asarray(r, dtype=float), 0.0)


@dataclass(frozen=True, eq=False)
class PenaltyFamily:
    """``lambda_rho(x, r) = m(r + shift(x)) / rho`` evaluated nodally on ``grid``.

    ``reg`` is the regularization actually applied (already rescaled for
    ``sc_tilde``); it is ``None`` for the nonsmooth kinds.
    """

    kind: str
    rho: float
    grid: Grid
    reg: Regularization | None
    lambda_bar: np.ndarray | None
    shift: np.ndarray
    k0: np.ndarray
    k1: np.ndarray
    j: np.ndarray
    reg_spec: object = field(default=None, repr=False)

    @property
    def smooth(self) -> bool:
        return self.reg is not None

    def value(self, r) -> np.ndarray:
        s = np.asarray(r, dtype=float) + self.shift
        m = self.reg.value if self.smooth else _positive_part
        return m(s) / self.rho

    def slope(self, r) -> np.ndarray:
        """Newton slope; at the nonsmooth kink the right branch ``1/rho`` is taken."""
        s = np.asarray(r, dtype=float) + self.shift
        if self.smooth:
            return np.asarray(self.reg.deriv(s), dtype=float) / self.rho
        return np.where(s >= 0.0, 1.0 / self.rho, 0.0)

    def dir_deriv(self, r, hdir) -> np.ndarray:
        r = np.asarray(r, dtype=float)
        hdir = np.asarray(hdir, dtype=float)
        if self.smooth:
            return self.slope(r) * hdir
        s = r + self.shift
        return np.where(s > 0.0, hdir, np.where(s == 0.0, np.maximum(hdir, 0.0), 0.0)) / self.rho

    # scalar per-node evaluators
    def eval(self, i: int, r: float) -> float:
        return float(self._node(i).value(r))

    def newton_slope(self, i: int, r: float) -> float:
        return float(self._node(i).slope(r))

    def dir_deriv_at(self, i: int, r: float, hdir: float) -> float:
        return float(self._node(i).dir_deriv(r, hdir))

    def _node(self, i):
        return _NodeView(self, self.shift[i])

    def with_rho(self, rho: float) -> PenaltyFamily:
        """Same kind, regularization type and ``lambda_bar`` at another ``rho``."""
        return make_family(self.kind, rho, self.grid, reg=self.reg_spec, lambda_bar=self.lambda_bar)

    def describe(self) -> dict:
        d = {
            "kind": self.kind,
            "rho": self.rho,
            "smooth": self.smooth,
            "formula": self.reg.formula() if self.smooth else _FORMULAS["max"],
            "k0": [float(self.k0.min()), float(self.k0.max())],
            "k1": [float(self.k1.min()), float(self.k1.max())],
            "j": [float(self.j.min()), float(self.j.max())],
        }
        if self.smooth:
            d.update(regularization=self.reg.kind, theta=self.reg.theta, Theta=self.reg.Theta, l=self.reg.l)
        return d


@dataclass(frozen=True)
class _NodeView:
    fam: PenaltyFamily
    shift: float

    def value(self, r):
        m = self.fam.reg.value if self.fam.smooth else _positive_part
        return m(r + self.shift) / self.fam.rho

    def slope(self, r):
        s = r + self.shift
        if self.fam.smooth:
            return self.fam.reg.deriv(s) / self.fam.rho
        return 1.0 / self.fam.rho if s >= 0.0 else 0.0

    def dir_deriv(self, r, hdir):
        if self.fam.smooth:
            return self.slope(r) * hdir
        s = r + self.shift
        if s > 0.0:
            return hdir / self.fam.rho
        if s == 0.0:
            return max(hdir, 0.0) / self.fam.rho
        return 0.0


def make_family(kind: str, rho: float, grid: Grid, reg=None, lambda_bar=None) -> PenaltyFamily:
    """Build one of the penalty families ``m``, ``c``, ``sm``, ``sc``, ``sc_tilde``.

    ``reg`` is a regularization name (width defaults to ``rho``) or a
    ``Regularization`` instance used as is.  ``lambda_bar`` is a nonnegative
    nodal array (or ``DiscreteField``/scalar) required by ``c``, ``sc`` and
    ``sc_tilde``.
    """
    if kind not in FAMILY_KINDS:
        raise ValueError(f"unknown penalty kind {kind!r}; expected one of {FAMILY_KINDS}")
    if not (np.isfinite(rho) and rho > 0):
        raise ValueError(f"rho must be positive, got {rho}")
    rho = float(rho)
    N = grid.N

    lb = None
    if kind in SHIFTED_KINDS:
        if lambda_bar is None:
            raise ValueError(f"penalty kind {kind!r} requires lambda_bar")
        if isinstance(lambda_bar, DiscreteField):
            lambda_bar = lambda_bar.values
        lb = np.array(np.broadcast_to(np.asarray(lambda_bar, dtype=float), (N,)))
        if np.any(lb < 0) or not np.all(np.isfinite(lb)):
            raise ValueError("lambda_bar must be finite and nonnegative")
        lb.setflags(write=False)
        shift = rho * lb
    else:
        shift = np.zeros(N)

    regularization = None
    if kind in SMOOTH_KINDS:
        if reg is None:
            raise ValueError(f"penalty kind {kind!r} requires a regularization")
        regularization = make_regularization(reg, rho) if isinstance(reg, str) else reg
        if kind == "sc_tilde":
            regularization = regularization.rescaled(rho)
        theta, Theta, l = regularization.theta, regularization.Theta, regularization.l
    else:
        theta = Theta = l = 0.0

    shift.setflags(write=False)
    k0 = theta - shift
    k1 = Theta - shift
    j = shift + l
    for a in (k0, k1, j):
        a.setflags(write=False)
    return PenaltyFamily(kind, rho, grid, regularization, lb, shift, k0, k1, j, reg_spec=reg)


def complementarity_weight(ops: EllipticOperators, psi: DiscreteField, f: DualVector) -> np.ndarray:
    """The usual ``lambda_bar = (f + Delta psi)^+`` as a nodal density."""
    g = f - ops.neg_laplacian(psi)
    return np.maximum(g.values / ops.mass, 0.0)


def growth_constant(fam: PenaltyFamily, rhos=None) -> float:
    """``sup_{rho in (0,1]} (||k0_rho||_L2 + ||k1_rho||_L2) / rho``.

    For the shipped families the ratio is a convex function of ``rho`` so the
    supremum is attained at an end of the sampled range.
    """
    if rhos is None:
        rhos = np.concatenate([np.logspace(-10, 0, 41), [1.0]])
    w = fam.grid.cell_volume
    best = 0.0
    for r in rhos:
        g = fam.with_rho(float(r))
        ratio = (np.sqrt(w * g.k0 @ g.k0) + np.sqrt(w * g.k1 @ g.k1)) / r
        best = max(best, float(ratio))
    return best


# ---------------------------------------------------------------- verification


@dataclass
class CheckResult:
    name: str
    passed: bool
    worst: float
    detail: str = ""


@dataclass
class AssumptionReport:
    kind: str
    regularization: str | None
    rho_schedule: list[float]
    checks: list[CheckResult]
    growth_constant: float

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def failed(self) -> list[str]:
        return [c.name for c in self.checks if not c.passed]

    def __getitem__(self, name) -> CheckResult:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "regularization": self.regularization,
            "rho_schedule": list(self.rho_schedule),
            "growth_constant": self.growth_constant,
            "passed": self.passed,
            "checks": [vars(c) for c in self.checks],
        }


def _node_classes(fam: PenaltyFamily) -> np.ndarray:
    # nodes sharing a shift have identical lambda(x, .)
    _, idx = np.unique(fam.shift, return_index=True)
    return idx


def verify_assumptions(fam: PenaltyFamily, rho_schedule=(1.0, 0.5, 0.25, 0.125), r_samples: int = 512,
                       seed: int = 0) -> AssumptionReport:
    """Sampling-based check of the structural and Lipschitz/convexity properties.

    Failures are recorded in the report; nothing is raised.
    """
    rng = np.random.default_rng(seed)
    acc: dict[str, list[float]] = {}
    info: dict[str, str] = {}

    def record(name, violation):
        acc.setdefault(name, []).append(float(violation))

    schedule = [float(r) for r in rho_schedule]
    if any(not 0 < r <= 1 for r in schedule):
        raise ValueError("rho_schedule must lie in (0, 1]")
    w = fam.grid.cell_volume
    growth = []
    k0_sup = []
    for rho in schedule:
        g = fam.with_rho(rho)
        tol = 1e-12 * max(1.0, 1.0 / rho)
        record("k0_le_k1", np.max(g.k0 - g.k1))
        record("k1_plus_j_nonneg", np.max(-(g.k1 + g.j)))
        if g.smooth:
            record("smooth_iff_k0_lt_k1", float(np.any(g.k0 >= g.k1)))
        else:
            record("smooth_iff_k0_lt_k1", float(np.any(g.k0 != g.k1)))
        growth.append((np.sqrt(w * g.k0 @ g.k0) + np.sqrt(w * g.k1 @ g.k1)) / rho)
        k0_sup.append(float(np.max(np.abs(g.k0))))

        for i in _node_classes(g):
            node = g._node(i)
            k0, k1, jj = g.k0[i], g.k1[i], g.j[i]
            span = max(k1 - k0, rho)
            r = np.concatenate([
                np.linspace(k0 - 1.0, k1 + 1.0, r_samples),
                np.linspace(k0 - span, k1 + span, r_samples // 4),
                [k0, k1],
            ])
            r = np.unique(r)
            lam = node.value(r)
            lo = r <= k0
            hi = r >= k1
            scale = 1.0 + np.max(np.abs(lam))
            record("vanishing_branch", np.max(np.abs(lam[lo]), initial=0.0) - 1e-12 * scale)
            record("eventually_linear", np.max(np.abs(lam[hi] - (r[hi] + jj) / rho), initial=0.0) - 1e-10 * scale)
            dlam = np.diff(lam)
            record("monotone", np.max(-dlam, initial=0.0) - 1e-12 * scale)
            sec = np.diff(dlam / np.diff(r))
            record("convex", np.max(-sec, initial=0.0) - 1e-8 * scale / rho)
            # Lipschitz on consecutive and random pairs
            q = np.abs(dlam) / np.diff(r)
            a, b = rng.choice(r, size=(2, r_samples))
            keep = a != b
            q2 = np.abs(node.value(a[keep]) - node.value(b[keep])) / np.abs(a[keep] - b[keep])
            record("lipschitz", max(np.max(q), np.max(q2, initial=0.0)) * rho - 1.0 - 1e-9)
            sl = np.array([node.slope(x) for x in r])
            record("slope_bounds", max(np.max(-sl), np.max(sl - 1.0 / rho)) - tol)
            band = (r >= k0) & (r <= k1)
            if np.any(band):
                gap = lam[band] - (r[band] - k0) * sl[band]
                record("convexity_gradient", np.max(gap) - 1e-12 * scale)
            rp = np.maximum(r, 0.0)
            record("lower_bound_rplus", np.max(-(lam * rp + k1 / rho * rp - rp * rp / rho)) - 1e-10 * scale * (1 + np.max(rp)))
            hs = rng.standard_normal(64)
            rr = rng.choice(r, size=64)
            dd = np.array([node.dir_deriv(x, hh) for x, hh in zip(rr, hs)])
            record("dir_deriv_bound", np.max(np.abs(dd) - np.abs(hs) / rho) - tol)
            t = rng.uniform(0.1, 10.0, size=64)
            dd_t = np.array([node.dir_deriv(x, tt * hh) for x, tt, hh in zip(rr, t, hs)])
            record("dir_deriv_homogeneous", np.max(np.abs(dd_t - t * dd)) - 1e-10 * np.max(np.abs(t * dd), initial=1.0))
            if g.smooth:
                # C^1 across the panel joints: one-sided quotients agree
                delta = 1e-7 * rho
                jumps = []
                for kk in (k0, k1):
                    right = (node.value(kk + delta) - node.value(kk)) / delta
                    left = (node.value(kk) - node.value(kk - delta)) / delta
                    jumps.append(abs(right - left) * rho)
                record("c1_at_joints", max(jumps) - 1e-4)
        # nodal L^2 estimate for Lambda(v - psi) with sampled v - psi
        for _ in range(8):
            rv = rng.uniform(np.min(g.k0) - 1.0, np.max(g.k1) + 1.0, size=g.grid.N)
            lhs = np.sqrt(w * np.sum(g.value(rv) ** 2))
            rp = np.maximum(rv, 0.0)
            rhs = np.sqrt(w * rp @ rp) / rho + np.sqrt(w * g.k0 @ g.k0) / rho
            record("lambda_l2_estimate", lhs - rhs - 1e-10 * (1 + rhs))

    C = float(max(growth))
    info["growth"] = f"fitted C = {C:.6g}"
    # k0 -> 0: sup-norm of k0 shrinks at least linearly in rho along the schedule
    ratios = np.array(k0_sup) / np.array(schedule)
    record("k0_vanishes", np.max(ratios) - ratios[0] * (1 + 1e-9) if ratios[0] > 0 else np.max(ratios))
    for rho in schedule:
        g = fam.with_rho(rho)
        record("j_growth", np.sqrt(w * g.j @ g.j) - 2 * C * rho - 1e-12)

    checks = [
        CheckResult(name, bool(max(v) <= 0.0), float(max(v)), info.get(name, ""))
        for name, v in acc.items()
    ]
    checks.append(CheckResult("growth", bool(np.isfinite(C)), C, info["growth"]))
    reg_name = fam.reg.kind if fam.smooth else None
    return AssumptionReport(fam.kind, reg_name, schedule, checks, C)
