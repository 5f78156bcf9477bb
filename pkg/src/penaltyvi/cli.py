"""Configuration-driven command line.

A config file is flat ``key = value`` text with dotted section keys and ``#``
comments::

    command = sweep
    instance = analytic_1d
    family.kind = sm
    family.reg = huber_global
    family.k_max = 8
    directions.count = 3

Fields (``psi``, ``f``, ``oc.y_d``, ``oc.f0``) are a constant, a polynomial in
``x`` and ``y``, or ``file:PATH`` pointing at a single-column nodal CSV.

Exit codes: 0 success, 2 invalid input, 3 solver failure, 4 failed checks.
"""
from __future__ import annotations

import argparse
import ast
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .grid import DiscreteField, build_grid, norm
from .limits import (INSTANCES, Instance, SweepConfig, bubble_directions, default_schedule, get_instance,
                     run_sweep, summary)
from .optcontrol import PATH_COLUMNS, ControlProblem, ControlSolverError, check_c_stationarity, solve_oc_path
from .output import write_csv, write_field_csv, write_json
from .penalty import (FAMILY_KINDS, REGULARIZATION_KINDS, SHIFTED_KINDS, SMOOTH_KINDS,
                      complementarity_weight, make_family, verify_assumptions)
from .penalty_solver import PenaltySolverError, solve_penalized
from .sensitivity import DerivativeOperator, NotGateaux, extract_measure
from .vi_ref import VISolverError, solve_pdas

log = logging.getLogger("penaltyvi")

EXIT_OK, EXIT_INVALID, EXIT_SOLVER, EXIT_CHECK = 0, 2, 3, 4
COMMANDS = ("solve", "sweep", "derivative", "oc", "verify")


class ConfigError(ValueError):
    def __init__(self, key, msg):
        super().__init__(f"{key}: {msg}")
        self.key = key


# key -> (parser, default); None default means optional with no value
def _str(v):
    return v.strip()


def _float(v):
    return float(v)


def _int(v):
    return int(v)


def _floats(v):
    return [float(t) for t in v.replace(",", " ").split()]


SCHEMA = {
    "command": (_str, None),
    "instance": (_str, None),
    "grid.dim": (_int, 1),
    "grid.extent": (_floats, None),
    "grid.n": (_int, 63),
    "psi": (_str, "0"),
    "f": (_str, "1"),
    "family.kind": (_str, "m"),
    "family.reg": (_str, None),
    "family.rho": (_float, 0.01),
    "family.rho_schedule": (_floats, None),
    "family.k_max": (_int, 8),
    "family.lambda_bar": (_str, "auto"),
    "directions.count": (_int, 0),
    "solver.tol": (_float, 1e-10),
    "solver.max_iter": (_int, 50),
    "oc.y_d": (_str, "0"),
    "oc.nu": (_float, 0.0),
    "oc.lo": (_float, -np.inf),
    "oc.up": (_float, np.inf),
    "oc.f0": (_str, "0"),
    "oc.tol_inner": (_float, 1e-8),
    "oc.max_inner": (_int, 2000),
    "output.dir": (_str, "out"),
    "seed": (_int, 0),
}


def parse_config_text(text: str) -> dict:
    raw = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", "expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(key, "unknown key")
        if key in raw:
            raise ConfigError(key, "given twice")
        raw[key] = value
    cfg = {}
    for key, (conv, default) in SCHEMA.items():
        if key in raw:
            try:
                cfg[key] = conv(raw[key])
            except ValueError:
                raise ConfigError(key, f"cannot parse {raw[key]!r}") from None
        else:
            cfg[key] = default
    validate(cfg)
    return cfg


def validate(cfg: dict):
    if cfg["command"] is None:
        raise ConfigError("command", "missing")
    if cfg["command"] not in COMMANDS:
        raise ConfigError("command", f"must be one of {COMMANDS}")
    if cfg["instance"] is not None and cfg["instance"] not in INSTANCES:
        raise ConfigError("instance", f"unknown instance; expected one of {tuple(INSTANCES)}")
    if cfg["grid.dim"] not in (1, 2):
        raise ConfigError("grid.dim", "must be 1 or 2")
    if cfg["grid.n"] < 1:
        raise ConfigError("grid.n", "must be a positive integer")
    ext = cfg["grid.extent"]
    if ext is not None:
        if len(ext) != 2 * cfg["grid.dim"] or any(b <= a for a, b in zip(ext[::2], ext[1::2])):
            raise ConfigError("grid.extent", "expected increasing (lo, hi) pairs, one per dimension")
    kind = cfg["family.kind"]
    if kind not in FAMILY_KINDS:
        raise ConfigError("family.kind", f"must be one of {FAMILY_KINDS}")
    reg = cfg["family.reg"]
    if kind in SMOOTH_KINDS and reg is None:
        raise ConfigError("family.reg", f"required for kind {kind!r}")
    if reg is not None and reg not in REGULARIZATION_KINDS:
        raise ConfigError("family.reg", f"must be one of {REGULARIZATION_KINDS}")
    rho = cfg["family.rho"]
    if not (np.isfinite(rho) and 0 < rho <= 1):
        raise ConfigError("family.rho", f"must lie in (0, 1], got {rho:g}")
    sched = cfg["family.rho_schedule"]
    if sched is not None:
        s = np.asarray(sched)
        if s.size == 0 or np.any(~np.isfinite(s)) or np.any(s <= 0) or np.any(s > 1) or np.any(np.diff(s) >= 0):
            raise ConfigError("family.rho_schedule", "must be strictly decreasing values in (0, 1]")
    if cfg["family.k_max"] < 1:
        raise ConfigError("family.k_max", "must be at least 1")
    lb = cfg["family.lambda_bar"]
    if lb != "auto":
        try:
            if float(lb) < 0:
                raise ConfigError("family.lambda_bar", "must be nonnegative")
        except ValueError:
            raise ConfigError("family.lambda_bar", "expected 'auto' or a nonnegative number") from None
    if cfg["directions.count"] < 0:
        raise ConfigError("directions.count", "must be nonnegative")
    for key in ("solver.tol", "oc.tol_inner"):
        if not cfg[key] > 0:
            raise ConfigError(key, "must be positive")
    for key in ("solver.max_iter", "oc.max_inner"):
        if cfg[key] < 1:
            raise ConfigError(key, "must be a positive integer")
    if not cfg["oc.nu"] >= 0:
        raise ConfigError("oc.nu", "must be nonnegative")
    if cfg["oc.lo"] > cfg["oc.up"]:
        raise ConfigError("oc.lo", "must not exceed oc.up")


# ---------------------------------------------------------------- field specs

_ALLOWED = (ast.Expression, ast.BinOp, ast.UnaryOp, ast.Constant, ast.Name, ast.Add, ast.Sub, ast.Mult,
            ast.Pow, ast.USub, ast.UAdd, ast.Load)


def polynomial(expr: str, key: str = "expression"):
    """Compile a polynomial in ``x``/``y`` (``+ - *`` and nonnegative integer powers)."""
    try:
        tree = ast.parse(expr.replace("^", "**"), mode="eval")
    except SyntaxError:
        raise ConfigError(key, f"cannot parse {expr!r}") from None
    for node in ast.walk(tree):
        if not isinstance(node, _ALLOWED):
            raise ConfigError(key, f"only polynomials in x, y are allowed, got {expr!r}")
        if isinstance(node, ast.Name) and node.id not in ("x", "y"):
            raise ConfigError(key, f"unknown variable {node.id!r}")
        if isinstance(node, ast.Constant) and not isinstance(node.value, (int, float)):
            raise ConfigError(key, "constants must be numeric")
        if isinstance(node, ast.BinOp) and isinstance(node.op, ast.Pow):
            e = node.right
            if not (isinstance(e, ast.Constant) and isinstance(e.value, int) and e.value >= 0):
                raise ConfigError(key, "exponents must be nonnegative integer literals")
    code = compile(tree, key, "eval")

    def f(x, y=None):
        y = np.zeros_like(x) if y is None else y
        return np.broadcast_to(np.asarray(eval(code, {"__builtins__": {}}, {"x": x, "y": y}), dtype=float),
                               np.shape(x)).copy()
    return f


def read_field_csv(path) -> np.ndarray:
    lines = Path(path).read_text().splitlines()
    return np.array([float(s) for s in lines[1:] if s.strip()])


def field_from_spec(spec: str, grid, key: str, with_trace: bool = True) -> DiscreteField:
    if spec.startswith("file:"):
        path = spec[5:].strip()
        try:
            vals = read_field_csv(path)
        except (OSError, ValueError) as e:
            raise ConfigError(key, f"cannot read nodal file {path!r}: {e}") from None
        if vals.size != grid.N:
            raise ConfigError(key, f"nodal file has {vals.size} values, grid has {grid.N}")
        return DiscreteField(grid, vals)
    return grid.interpolate(polynomial(spec, key), with_trace=with_trace)


def build_instance(cfg) -> Instance:
    if cfg["instance"] is not None:
        return get_instance(cfg["instance"])
    dim = cfg["grid.dim"]
    ext = cfg["grid.extent"] or ((0.0, 1.0) if dim == 1 else (0.0, 1.0, 0.0, 1.0))
    grid, ops = build_grid(dim, ext, cfg["grid.n"])
    psi = field_from_spec(cfg["psi"], grid, "psi")
    f = field_from_spec(cfg["f"], grid, "f", with_trace=False)
    return Instance("custom", ops, psi, ops.load(f.values))


def schedule(cfg) -> np.ndarray:
    if cfg["family.rho_schedule"] is not None:
        return np.asarray(cfg["family.rho_schedule"])
    return default_schedule(cfg["family.k_max"])


def lambda_bar(cfg, inst):
    if cfg["family.kind"] not in SHIFTED_KINDS:
        return None
    lb = cfg["family.lambda_bar"]
    if lb == "auto":
        return complementarity_weight(inst.ops, inst.psi, inst.f)
    return np.full(inst.grid.N, float(lb))


# ---------------------------------------------------------------- commands

@dataclass
class Context:
    cfg: dict
    out: Path
    seed: int
    jobs: int


def cmd_solve(ctx: Context) -> int:
    cfg = ctx.cfg
    inst = build_instance(cfg)
    ops = inst.ops
    fam = make_family(cfg["family.kind"], cfg["family.rho"], inst.grid, reg=cfg["family.reg"],
                      lambda_bar=lambda_bar(cfg, inst))
    vi = solve_pdas(ops, inst.psi, inst.f, max_iter=max(200, 4 * inst.grid.N))
    sol = solve_penalized(ops, fam, inst.psi, inst.f, tol=cfg["solver.tol"], max_iter=cfg["solver.max_iter"])
    err = sol.u_rho - vi.u
    report = {
        "command": "solve",
        "instance": inst.name,
        "family": fam.describe(),
        "newton_iters": sol.newton_iters,
        "residual_norm": sol.residual_norm,
        "err_H10": norm(ops, err, "H10"),
        "err_L2": norm(ops, err, "L2"),
        "feas_L2": norm(ops, (sol.u_rho - inst.psi).positive_part(), "L2"),
        "kinks": int(np.size(sol.kink_nodes)),
        "vi_iterations": vi.iterations,
        "n_active": int(vi.active.sum()),
        "n_strictly_active": int(vi.strictly_active.sum()),
    }
    write_json(ctx.out / "solve.json", report)
    write_field_csv(ctx.out / "u_rho.csv", sol.u_rho, "u_rho")
    write_field_csv(ctx.out / "u.csv", vi.u, "u")
    write_field_csv(ctx.out / "xi.csv", ops.density(vi.xi), "xi")
    return EXIT_OK


def _directions(ctx, inst):
    return bubble_directions(inst.ops, ctx.cfg["directions.count"], np.random.default_rng(ctx.seed))


def cmd_sweep(ctx: Context) -> int:
    cfg = ctx.cfg
    inst = build_instance(cfg)
    sc = SweepConfig(inst, cfg["family.kind"], cfg["family.reg"], lambda_bar=lambda_bar(cfg, inst),
                     rho_schedule=schedule(cfg), directions=_directions(ctx, inst), tol=cfg["solver.tol"],
                     jobs=ctx.jobs)
    rec = run_sweep(sc)
    rec.write_csv(ctx.out / "sweep.csv")
    write_json(ctx.out / "sweep_summary.json", {"command": "sweep", "instance": inst.name, **summary(rec)})
    return EXIT_OK


DERIVATIVE_COLUMNS = ("direction", "d_Hminus1", "alpha_H10", "alpha_L2", "alpha_max", "alpha_min")


def cmd_derivative(ctx: Context) -> int:
    cfg = ctx.cfg
    inst = build_instance(cfg)
    ops = inst.ops
    if cfg["directions.count"] < 1:
        raise ConfigError("directions.count", "the derivative command needs at least one direction")
    fam = make_family(cfg["family.kind"], cfg["family.rho"], inst.grid, reg=cfg["family.reg"],
                      lambda_bar=lambda_bar(cfg, inst))
    sol = solve_penalized(ops, fam, inst.psi, inst.f, tol=cfg["solver.tol"], max_iter=cfg["solver.max_iter"])
    deriv = DerivativeOperator(ops, extract_measure(fam, sol, inst.psi))
    rows = []
    for j, d in enumerate(_directions(ctx, inst)):
        a = deriv(d)
        rows.append({
            "direction": j,
            "d_Hminus1": norm(ops, d, "Hminus1"),
            "alpha_H10": norm(ops, a, "H10"),
            "alpha_L2": norm(ops, a, "L2"),
            "alpha_max": float(a.values.max()),
            "alpha_min": float(a.values.min()),
        })
        write_field_csv(ctx.out / f"alpha_{j}.csv", a, f"alpha_{j}")
    write_csv(ctx.out / "derivative.csv", DERIVATIVE_COLUMNS, rows)
    write_field_csv(ctx.out / "weights.csv", DiscreteField(inst.grid, deriv.mu.weights), "weights")
    return EXIT_OK


def cmd_oc(ctx: Context) -> int:
    cfg = ctx.cfg
    inst = build_instance(cfg)
    kind = cfg["family.kind"]
    if kind not in SMOOTH_KINDS:
        raise ConfigError("family.kind", f"the oc command needs a smooth kind {SMOOTH_KINDS}")
    grid = inst.grid
    prob = ControlProblem(inst.ops, inst.psi, field_from_spec(cfg["oc.y_d"], grid, "oc.y_d"),
                          nu=cfg["oc.nu"], lo=cfg["oc.lo"], up=cfg["oc.up"])
    f0 = field_from_spec(cfg["oc.f0"], grid, "oc.f0", with_trace=False).values
    if np.any(f0 < prob.lo) or np.any(f0 > prob.up):
        raise ConfigError("oc.f0", "initial control must lie within [oc.lo, oc.up]")
    rhos = schedule(cfg)
    fam = make_family(kind, float(rhos[0]), grid, reg=cfg["family.reg"], lambda_bar=lambda_bar(cfg, inst))
    cert = solve_oc_path(prob, fam, rhos, f0, tol_inner=cfg["oc.tol_inner"], max_inner=cfg["oc.max_inner"])
    f_bar = cert.f_bar.values
    vi = solve_pdas(inst.ops, inst.psi, inst.ops.load(f_bar), max_iter=max(200, 4 * grid.N))
    check_c_stationarity(cert, vi, prob)
    write_csv(ctx.out / "oc_path.csv", PATH_COLUMNS, cert.path)
    payload = cert.to_dict()
    for k in ("f_bar", "y_bar", "p"):
        payload.pop(k)
    write_json(ctx.out / "certificate.json", {"command": "oc", **payload})
    write_field_csv(ctx.out / "f_bar.csv", cert.f_bar, "f_bar")
    write_field_csv(ctx.out / "y_bar.csv", cert.y_bar, "y_bar")
    write_field_csv(ctx.out / "p.csv", cert.p, "p")
    return EXIT_OK


def cmd_verify(ctx: Context) -> int:
    from .verify import run_suite

    results = run_suite(jobs=ctx.jobs)
    for r in results:
        print(r.line())
    ok = all(r.passed for r in results)
    write_json(ctx.out / "verify.json", {
        "command": "verify",
        "all_passed": ok,
        "criteria": [r.to_dict() for r in results],
    })
    return EXIT_OK if ok else EXIT_CHECK


HANDLERS = {"solve": cmd_solve, "sweep": cmd_sweep, "derivative": cmd_derivative, "oc": cmd_oc,
            "verify": cmd_verify}


def run(config_path, out=None, seed=None, jobs=1) -> int:
    """Execute the command named in a config file; returns the exit code."""
    try:
        try:
            text = Path(config_path).read_text()
        except OSError as e:
            raise ConfigError("--config", f"cannot read {config_path}: {e.strerror}") from None
        cfg = parse_config_text(text)
        if jobs < 1:
            raise ConfigError("--jobs", "must be at least 1")
        ctx = Context(cfg, Path(out if out is not None else cfg["output.dir"]),
                      cfg["seed"] if seed is None else seed, jobs)
        return HANDLERS[cfg["command"]](ctx)
    except ConfigError as e:
        print(f"error: invalid configuration, {e}", file=sys.stderr)
        return EXIT_INVALID
    except (PenaltySolverError, VISolverError, ControlSolverError, NotGateaux) as e:
        print(f"error: solver failure, {e}", file=sys.stderr)
        return EXIT_SOLVER
    except ValueError as e:
        print(f"error: invalid input, {e}", file=sys.stderr)
        return EXIT_INVALID


# ---------------------------------------------------------------- describe

def describe(name: str, rho: float, kind: str | None = None, lambda_bar: float = 1.0) -> str:
    """Human-readable summary of a penalty family.

    ``name`` is a family kind or a regularization (which implies kind ``sm``
    unless ``kind`` is given).
    """
    if name in REGULARIZATION_KINDS:
        kind, reg = kind or "sm", name
    elif name in FAMILY_KINDS:
        kind, reg = name, None
        if kind in SMOOTH_KINDS:
            raise ValueError(f"kind {kind!r} needs a regularization; name one of {REGULARIZATION_KINDS}")
    else:
        raise ValueError(f"unknown family {name!r}; expected one of {FAMILY_KINDS + REGULARIZATION_KINDS}")
    if kind not in SMOOTH_KINDS and reg is not None:
        raise ValueError(f"kind {kind!r} takes no regularization")
    if not (np.isfinite(rho) and 0 < rho <= 1):
        raise ValueError(f"rho must lie in (0, 1], got {rho}")
    grid, _ = build_grid(1, (0.0, 1.0), 3)
    fam = make_family(kind, rho, grid, reg=reg, lambda_bar=lambda_bar)
    d = fam.describe()
    rep = verify_assumptions(fam)
    lines = [f"family: {kind}" + (f" / {reg}" if reg else "")]
    lines.append(f"rho = {rho:g}")
    if kind in SHIFTED_KINDS:
        lines.append(f"lambda_bar = {lambda_bar:g}")
    lines.append(f"m(r): {d['formula']}")
    if fam.smooth:
        lines.append(f"theta = {d['theta']:g}, Theta = {d['Theta']:g}, l = {d['l']:g}")
    for k in ("k0", "k1", "j"):
        lo, hi = d[k]
        lines.append(f"{k} = {lo:g}" if lo == hi else f"{k} in [{lo:g}, {hi:g}]")
    lines.append(f"growth constant C = {rep.growth_constant:g}")
    lines.append("assumptions: " + ("all checks passed" if rep.passed else "FAILED " + ", ".join(rep.failed())))
    for c in rep.checks:
        lines.append(f"  {'ok  ' if c.passed else 'FAIL'} {c.name} (worst {c.worst:.3g})")
    return "\n".join(lines)


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="penaltyvi", description=__doc__.split("\n\n")[0])
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="action", required=True)
    r = sub.add_parser("run", help="execute the command named in a config file")
    r.add_argument("--config", required=True, metavar="PATH")
    r.add_argument("--jobs", type=int, default=1, metavar="N")
    r.add_argument("--out", metavar="DIR")
    r.add_argument("--seed", type=int, metavar="N")
    v = sub.add_parser("verify", help="run the default verification suite")
    v.add_argument("--jobs", type=int, default=1, metavar="N")
    v.add_argument("--out", default="out", metavar="DIR")
    d = sub.add_parser("describe", help="print a penalty family's parameters")
    d.add_argument("name", help=f"one of {', '.join(FAMILY_KINDS + REGULARIZATION_KINDS)}")
    d.add_argument("--rho", type=float, default=0.1)
    d.add_argument("--kind", choices=SMOOTH_KINDS, help="smooth kind for a regularization name (default sm)")
    d.add_argument("--lambda-bar", type=float, default=1.0, help="constant weight for the shifted kinds")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    if args.action == "run":
        return run(args.config, out=args.out, seed=args.seed, jobs=args.jobs)
    if args.action == "verify":
        if args.jobs < 1:
            print("error: invalid configuration, --jobs: must be at least 1", file=sys.stderr)
            return EXIT_INVALID
        return cmd_verify(Context({}, Path(args.out), 0, args.jobs))
    try:
        print(describe(args.name, args.rho, args.kind, args.lambda_bar))
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
