"""Convergence studies along a penalty schedule ``rho_k -> 0``.

``run_sweep`` solves the penalized problems down the schedule (warm-started),
differentiates along a panel of directions and records, per ``rho`` and
direction, the distances to the obstacle-problem solution and the discrete
limit conditions on the derivatives.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .grid import DiscreteField, DualVector, EllipticOperators, build_grid, norm
from .output import SCHEMA_VERSION, csv_text, json_text, write_csv, write_json
from .penalty import SHIFTED_KINDS, complementarity_weight, growth_constant, make_family
from .penalty_solver import (PenaltySolverError, feasibility_bound, l2_feasibility_bound,
                             multiplier_bound, solve_penalized)
from .sensitivity import DerivativeOperator, NotGateaux, WeightMeasure, solve_weighted
from .vi_ref import VISolution, solve_pdas

log = logging.getLogger(__name__)

TAU_ZERO = 1e-6
TAU_INF = 1e-2
GAP_FLOOR = 1e-12  # nodal violations below this (relative to |psi|) count as zero


def default_schedule(k_max: int = 8) -> np.ndarray:
    return 4.0 ** -np.arange(1, k_max + 1)


# ------------------------------------------------------------------ instances


@dataclass(frozen=True, eq=False)
class Instance:
    name: str
    ops: EllipticOperators
    psi: DiscreteField
    f: DualVector
    description: str = ""

    @property
    def grid(self):
        return self.ops.grid


def analytic_instance(n: int = 255) -> Instance:
    """``f = 8``, ``psi = 1/2`` on ``(0, 1)``; contact on ``[a, 1 - a]`` with ``a = 1/(2 sqrt 2)``."""
    grid, ops = build_grid(1, (0.0, 1.0), n)
    return Instance("analytic_1d", ops, grid.constant(0.5), ops.load(8.0),
                    "1D, f = 8, psi = 1/2; exact free boundary at 1/(2 sqrt 2)")


def l2_regular_instance(n: int = 255) -> Instance:
    """``psi = 0``, ``f = 1`` on ``(0, 4)``: everything is strictly active and ``f + Delta psi`` is L^2."""
    grid, ops = build_grid(1, (0.0, 4.0), n)
    return Instance("l2_regular", ops, grid.constant(0.0), ops.load(1.0),
                    "1D on (0, 4), psi = 0, f = 1; fully strictly active")


def contact_2d_instance(n: int = 31) -> Instance:
    grid, ops = build_grid(2, (0.0, 1.0, 0.0, 1.0), n)
    return Instance("contact_2d", ops, grid.constant(0.05), ops.load(8.0),
                    "unit square, psi = 0.05, f = 8; central contact region")


def unconstrained_instance(n: int = 63) -> Instance:
    grid, ops = build_grid(1, (0.0, 1.0), n)
    return Instance("unconstrained", ops, grid.constant(1.0), ops.load(1.0),
                    "1D, psi = 1 above the Poisson solution of f = 1; never active")


def biactive_instance(n: int = 63) -> Instance:
    grid, ops = build_grid(1, (0.0, 1.0), n)
    return Instance("biactive", ops, grid.constant(0.0), ops.load(0.0),
                    "1D, psi = 0, f = 0; every node is biactive")


INSTANCES: dict[str, Callable[..., Instance]] = {
    "analytic_1d": analytic_instance,
    "l2_regular": l2_regular_instance,
    "contact_2d": contact_2d_instance,
    "unconstrained": unconstrained_instance,
    "biactive": biactive_instance,
}


def get_instance(name: str, **kw) -> Instance:
    if name not in INSTANCES:
        raise ValueError(f"unknown instance {name!r}; expected one of {tuple(INSTANCES)}")
    return INSTANCES[name](**kw)


def bubble_directions(ops: EllipticOperators, count: int, rng: np.random.Generator) -> list[DualVector]:
    """``d = -Delta v`` with ``v > 0`` in the interior, normalized to ``||d||_H-1 = 1``."""
    grid = ops.grid
    xs = grid.coords()
    bounds = list(zip(grid.extent[::2], grid.extent[1::2]))
    bub = np.ones(grid.N)
    for x, (a, b) in zip(xs, bounds):
        bub = bub * (x - a) * (b - x) / (b - a) ** 2
    dirs = []
    for _ in range(count):
        wave = np.zeros(grid.N)
        for x, (a, b) in zip(xs, bounds):
            k = rng.integers(1, 5)
            wave += np.sin(2 * np.pi * k * (x - a) / (b - a) + rng.uniform(0, 2 * np.pi))
        v = bub * (1.0 + 0.5 * wave / grid.dim)
        d = ops.neg_laplacian(DiscreteField(grid, v))
        dirs.append(d * (1.0 / norm(ops, d, "Hminus1")))
    return dirs


# ---------------------------------------------------------------------- sweep


@dataclass
class SweepConfig:
    instance: Instance
    kind: str = "m"
    reg: str | None = None
    lambda_bar: np.ndarray | None = None
    rho_schedule: np.ndarray = field(default_factory=default_schedule)
    directions: list[DualVector] = field(default_factory=list)
    tol: float = 1e-10
    f_rho: Callable[[float], DualVector] | None = None  # defaults to the constant sequence f
    jobs: int = 1

    def __post_init__(self):
        rhos = np.asarray(self.rho_schedule, dtype=float)
        if rhos.ndim != 1 or rhos.size == 0:
            raise ValueError("rho_schedule must be a nonempty list")
        if np.any(~np.isfinite(rhos)) or np.any(rhos <= 0) or np.any(rhos > 1):
            raise ValueError("rho_schedule must lie in (0, 1]")
        if np.any(np.diff(rhos) >= 0):
            raise ValueError("rho_schedule must be strictly decreasing")
        self.rho_schedule = rhos
        if self.lambda_bar is None and self.kind in SHIFTED_KINDS:
            inst = self.instance
            self.lambda_bar = complementarity_weight(inst.ops, inst.psi, inst.f)
        if not self.tol > 0:
            raise ValueError("tol must be positive")

    def family(self, rho):
        return make_family(self.kind, rho, self.instance.grid, reg=self.reg, lambda_bar=self.lambda_bar)

    def load(self, rho) -> DualVector:
        return self.instance.f if self.f_rho is None else self.f_rho(rho)


class NotGateauxAt(NotGateaux):
    def __init__(self, rho, nodes):
        super().__init__(nodes)
        self.rho = rho
        self.args = (f"rho={rho:g}: {self.args[0]}",)


RHO_COLUMNS = (
    "rho", "newton_iters", "residual_norm", "err_H10", "feas_L2", "feas_L2_scaled", "multiplier_L2",
    "feas_bound", "multiplier_bound", "l2_feas_bound", "max_w_I", "min_w_As", "kinks",
)
DIRECTION_COLUMNS = (
    "direction", "d_Hminus1", "alpha_H10", "xi_rho_alpha", "xi_rho_alpha_plus", "xi_rho_alpha_minus",
    "xi_alpha", "xi_alpha_plus", "xi_alpha_minus", "max_alpha_As", "residual_I", "cauchy_L2",
)
CSV_COLUMNS = ("schema_version",) + RHO_COLUMNS + DIRECTION_COLUMNS


@dataclass
class SweepRecord:
    config: SweepConfig
    vi: VISolution
    growth_C: float
    rho_rows: list[dict]
    direction_rows: list[list[dict]]  # [rho index][direction index]
    weights: np.ndarray  # (n_rho, N) penalty slopes at u_rho
    alphas: np.ndarray  # (n_rho, n_dir, N)
    u_rho: np.ndarray  # (n_rho, N)

    @property
    def rhos(self) -> np.ndarray:
        return self.config.rho_schedule

    def column(self, name: str, direction: int | None = None) -> np.ndarray:
        if name in RHO_COLUMNS:
            return np.array([r[name] for r in self.rho_rows], dtype=float)
        if direction is None:
            raise ValueError(f"{name!r} is a per-direction column; pass direction")
        return np.array([rows[direction][name] for rows in self.direction_rows], dtype=float)

    def rows(self) -> list[dict]:
        out = []
        for k, base in enumerate(self.rho_rows):
            dir_rows = self.direction_rows[k] or [{}]
            for d in dir_rows:
                out.append({"schema_version": SCHEMA_VERSION, **base, **d})
        return out

    def csv(self) -> str:
        return csv_text(CSV_COLUMNS, self.rows())

    def write_csv(self, path):
        return write_csv(path, CSV_COLUMNS, self.rows())


def _classify(vi: VISolution):
    return vi.inactive, vi.strictly_active


def _direction_metrics(ops, vi, xi_rho, deriv, d, j, alpha_prev):
    a = deriv(d)
    I, As = _classify(vi)
    res = ops.K @ a.values - d.values
    ap, am = a.positive_part(), a.negative_part()
    cauchy = None if alpha_prev is None else norm(ops, DiscreteField(ops.grid, a.values - alpha_prev), "L2")
    row = {
        "direction": j,
        "d_Hminus1": norm(ops, d, "Hminus1"),
        "alpha_H10": norm(ops, a, "H10"),
        "xi_rho_alpha": xi_rho.pair(a),
        "xi_rho_alpha_plus": xi_rho.pair(ap),
        "xi_rho_alpha_minus": xi_rho.pair(am),
        "xi_alpha": vi.xi.pair(a),
        "xi_alpha_plus": vi.xi.pair(ap),
        "xi_alpha_minus": vi.xi.pair(am),
        "max_alpha_As": float(np.max(np.abs(a.values[As]), initial=0.0)),
        "residual_I": float(np.max(np.abs(res[I]), initial=0.0)),
        "cauchy_L2": cauchy,
    }
    return row, a.values


def positive_gap(gap: np.ndarray, psi: DiscreteField, u: np.ndarray) -> np.ndarray:
    """``(u - psi)^+`` with entries at roundoff level treated as zero."""
    noise = 8 * np.finfo(float).eps * (np.abs(u) + np.abs(psi.values)) + GAP_FLOOR * (1.0 + np.max(np.abs(psi.values)))
    return np.where(gap > noise, gap, 0.0)


def run_sweep(cfg: SweepConfig, vi: VISolution | None = None) -> SweepRecord:
    inst = cfg.instance
    ops, psi = inst.ops, inst.psi
    if vi is None:
        vi = solve_pdas(ops, psi, inst.f, max_iter=max(200, 4 * ops.grid.N))
    C = growth_constant(cfg.family(1.0))
    I, As = _classify(vi)
    n_rho, n_dir, N = len(cfg.rho_schedule), len(cfg.directions), ops.grid.N
    weights = np.zeros((n_rho, N))
    alphas = np.zeros((n_rho, n_dir, N))
    us = np.zeros((n_rho, N))
    rho_rows, direction_rows = [], []
    u0 = None
    executor = ThreadPoolExecutor(max_workers=cfg.jobs) if cfg.jobs > 1 and n_dir > 1 else None
    try:
        for k, rho in enumerate(cfg.rho_schedule):
            fam = cfg.family(rho)
            F = cfg.load(rho)
            try:
                sol = solve_penalized(ops, fam, psi, F, tol=cfg.tol, u0=u0)
            except PenaltySolverError as exc:
                raise PenaltySolverError(f"rho={rho:g}: {exc}", last=exc.last) from exc
            u0 = sol.u_rho
            us[k] = sol.u_rho.values
            gap = sol.gap
            w = fam.slope(gap)
            weights[k] = w
            feas = norm(ops, DiscreteField(ops.grid, positive_gap(gap, psi, us[k])), "L2")
            lam = DiscreteField(ops.grid, fam.value(gap))
            rho_rows.append({
                "rho": float(rho),
                "newton_iters": sol.newton_iters,
                "residual_norm": sol.residual_norm,
                "err_H10": norm(ops, sol.u_rho - vi.u, "H10"),
                "feas_L2": feas,
                "feas_L2_scaled": feas / np.sqrt(rho),
                "multiplier_L2": norm(ops, lam, "L2"),
                "feas_bound": feasibility_bound(ops, psi, F, rho, C),
                "multiplier_bound": multiplier_bound(ops, psi, F, rho, C),
                "l2_feas_bound": l2_feasibility_bound(ops, fam, psi, F),
                "max_w_I": float(np.max(w[I], initial=0.0)),
                "min_w_As": float(np.min(w[As], initial=np.inf)) if np.any(As) else 0.0,
                "kinks": int(sol.kink_nodes.size),
            })
            if cfg.directions and not sol.gateaux_flag:
                raise NotGateauxAt(rho, sol.kink_nodes)
            deriv = DerivativeOperator(ops, WeightMeasure(w))
            prev = alphas[k - 1] if k > 0 else [None] * n_dir
            args = [(ops, vi, sol.xi_rho, deriv, d, j, prev[j]) for j, d in enumerate(cfg.directions)]
            results = list(executor.map(lambda a: _direction_metrics(*a), args)) if executor else \
                [_direction_metrics(*a) for a in args]
            direction_rows.append([r for r, _ in results])
            for j, (_, a) in enumerate(results):
                alphas[k, j] = a
    finally:
        if executor is not None:
            executor.shutdown()
    return SweepRecord(cfg, vi, C, rho_rows, direction_rows, weights, alphas, us)


# ------------------------------------------------------------------ analysis


@dataclass(frozen=True)
class RateFit:
    slope: float
    intercept: float
    r2: float
    n_used: int
    degenerate: bool
    excluded: tuple[int, ...] = ()


def fit_rate(xs, ys) -> RateFit:
    """Least squares on ``(log x, log y)``; nonpositive or denormal ``y`` are dropped."""
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    if xs.shape != ys.shape or xs.ndim != 1:
        raise ValueError("xs and ys must be 1D arrays of equal length")
    if xs.size < 3:
        raise ValueError("need at least 3 points")
    if np.any(~(xs > 0)):
        raise ValueError("xs must be positive")
    if np.any(~np.isfinite(ys)) or np.any(ys < 0):
        raise ValueError("ys must be finite and nonnegative")
    keep = ys >= np.finfo(float).tiny
    excluded = tuple(int(i) for i in np.flatnonzero(~keep))
    lx, ly = np.log(xs[keep]), np.log(ys[keep])
    if lx.size < 3 or np.ptp(lx) == 0:
        return RateFit(float("nan"), float("nan"), float("nan"), int(lx.size), True, excluded)
    slope, intercept = np.polyfit(lx, ly, 1)
    ss_res = float(np.sum((ly - (slope * lx + intercept)) ** 2))
    ss_tot = float(np.sum((ly - ly.mean()) ** 2))
    r2 = 1.0 if ss_tot <= 1e-30 * max(1.0, float(ly @ ly)) else 1.0 - ss_res / ss_tot
    if abs(slope) < 1e-12:
        slope = 0.0
    return RateFit(float(slope), float(intercept), float(r2), int(lx.size), False, excluded)


@dataclass
class MeasureReport:
    zero_nodes: np.ndarray
    inf_nodes: np.ndarray
    finite_nodes: np.ndarray
    ambiguous_nodes: np.ndarray
    rho_min: float
    tau_zero: float
    tau_inf: float

    def to_dict(self) -> dict:
        return {
            "zero": int(self.zero_nodes.size),
            "infinite": int(self.inf_nodes.size),
            "finite": int(self.finite_nodes.size),
            "ambiguous": self.ambiguous_nodes.tolist(),
            "rho_min": self.rho_min,
            "tau_zero": self.tau_zero,
            "tau_inf": self.tau_inf,
        }


def limit_measure_estimate(record: SweepRecord, tau_zero: float = TAU_ZERO, tau_inf: float = TAU_INF,
                           settle: float = 1e-2) -> tuple[WeightMeasure, MeasureReport]:
    """Classify the smallest-``rho`` weights into ``0``, ``inf`` or a finite value.

    Nodes in neither bucket keep their last weight; they are listed as
    ambiguous when that weight still moved by more than ``settle`` (relative)
    over the last step of the schedule.
    """
    w = record.weights[-1]
    rho_min = float(record.rhos[-1])
    zero = w <= tau_zero
    inf = w >= tau_inf / rho_min
    mid = ~zero & ~inf
    if record.weights.shape[0] > 1:
        prev = record.weights[-2]
        moving = np.abs(w - prev) > settle * np.maximum(np.abs(w), np.abs(prev))
    else:
        moving = np.ones_like(mid)
    mu = np.where(zero, 0.0, np.where(inf, np.inf, w))
    report = MeasureReport(
        np.flatnonzero(zero), np.flatnonzero(inf), np.flatnonzero(mid & ~moving),
        np.flatnonzero(mid & moving), rho_min, tau_zero, tau_inf,
    )
    return WeightMeasure(mu), report


def measure_consistency(record: SweepRecord, mu: WeightMeasure) -> np.ndarray:
    """``||alpha_{rho_min}(d) - L_mu d||_L2 / ||d||_H-1`` for every swept direction."""
    ops = record.config.instance.ops
    out = []
    for j, d in enumerate(record.config.directions):
        dn = norm(ops, d, "Hminus1")
        if dn == 0.0:
            out.append(0.0)
            continue
        y = solve_weighted(ops, mu, d)
        diff = DiscreteField(ops.grid, record.alphas[-1, j] - y.values)
        out.append(norm(ops, diff, "L2") / dn)
    return np.array(out)


def linearity_defect(ops: EllipticOperators, mu: WeightMeasure, d: DualVector) -> float:
    """``||L_mu d + L_mu(-d)||_H10``; zero since ``L_mu`` is linear."""
    return norm(ops, solve_weighted(ops, mu, d) + solve_weighted(ops, mu, -d), "H10")


def limit_condition_report(record: SweepRecord) -> dict:
    """Orthogonality, vanishing on ``A_s`` and the equation on ``I`` at the smallest ``rho``."""
    last = record.direction_rows[-1] if record.direction_rows else []
    per_dir = []
    for r in last:
        dn = r["d_Hminus1"]
        per_dir.append({
            "direction": r["direction"],
            "d_Hminus1": dn,
            "xi_alpha": abs(r["xi_alpha"]),
            "xi_alpha_plus": abs(r["xi_alpha_plus"]),
            "xi_alpha_minus": abs(r["xi_alpha_minus"]),
            "max_alpha_As": r["max_alpha_As"],
            "residual_I": r["residual_I"],
        })
    keys = ("xi_alpha", "xi_alpha_plus", "xi_alpha_minus", "max_alpha_As", "residual_I")
    worst = {k: max((p[k] for p in per_dir), default=0.0) for k in keys}
    worst_rel = {
        k: max((p[k] / p["d_Hminus1"] if p["d_Hminus1"] > 0 else 0.0 for p in per_dir), default=0.0)
        for k in keys[:3]
    }
    slopes = []
    cauchy_decreasing = []
    for j in range(len(record.config.directions)):
        ys = record.column("max_alpha_As", j)
        if len(ys) >= 3 and np.any(ys > 0):
            slopes.append(fit_rate(record.rhos, ys).slope)
        c = record.column("cauchy_L2", j)[1:]
        cauchy_decreasing.append(bool(np.all(np.diff(c) <= 0)) if c.size > 1 else True)
    return {
        "rho": float(record.rhos[-1]),
        "per_direction": per_dir,
        "worst": worst,
        "worst_relative": worst_rel,
        "max_alpha_As_slopes": slopes,
        "cauchy_decreasing": cauchy_decreasing,
    }


def bound_violations(record: SweepRecord) -> dict:
    """Largest excess of the measured quantities over their a-priori bounds (<= 0 means satisfied)."""
    feas = record.column("feas_L2") - record.column("feas_bound")
    mult = record.column("multiplier_L2") - record.column("multiplier_bound")
    l2 = record.column("feas_L2") - record.column("l2_feas_bound")
    return {"feasibility": float(feas.max()), "multiplier": float(mult.max()), "l2_regular": float(l2.max())}


def summary(record: SweepRecord) -> dict:
    rhos = record.rhos
    fits = {}
    for name in ("err_H10", "feas_L2", "feas_L2_scaled"):
        ys = record.column(name)
        if len(ys) >= 3:
            fits[name] = vars(fit_rate(rhos, ys))
    cfg = record.config
    return {
        "instance": cfg.instance.name,
        "kind": cfg.kind,
        "regularization": cfg.reg,
        "rho_schedule": rhos.tolist(),
        "growth_constant": record.growth_C,
        "fits": fits,
        "bounds": bound_violations(record),
        "limit_conditions": limit_condition_report(record) if cfg.directions else None,
    }


def write_summary(record: SweepRecord, path):
    return write_json(path, summary(record))


def summary_json(record: SweepRecord) -> str:
    return json_text(summary(record))
