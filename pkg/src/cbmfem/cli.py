"""Command-line frontend: solve, converge, sweep.

Problems come from TOML files or from the packaged presets (referenced by
bare name).  Results land in an output directory as JSON (solution vectors)
and CSV (diagnostics, convergence tables, sweep traces).  Exit codes are
scriptable: 0 success, 1 solver or tracing failure, 2 bad configuration or
usage.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from datetime import datetime, timezone
from importlib import resources
from pathlib import Path

import numpy as np

from .analysis import convergence_table, parameter_sweep, shooting_oracle_1d
from .config import ConfigError, ProblemConfig, load_config
from .multilevel import SolverError, cbmfem_run
from .nonlinearity import ProblemSpec
from .systems import solve_system

_EXIT_OK = 0
_EXIT_SOLVER = 1
_EXIT_CONFIG = 2


def preset_names() -> list:
    """Names of the problem files shipped inside the package."""
    root = resources.files("cbmfem") / "presets"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".toml"))


def resolve_config(arg: str) -> Path:
    """A filesystem path as given, else a packaged preset by bare name."""
    p = Path(arg)
    if p.exists():
        return p
    candidate = resources.files("cbmfem") / "presets" / f"{arg}.toml"
    if candidate.is_file():
        return Path(str(candidate))
    raise ConfigError(
        f"no such config file or preset: {arg!r}; packaged presets: "
        f"{', '.join(preset_names())}")


def _parse_overrides(pairs) -> dict:
    out = {}
    for pair in pairs or []:
        name, sep, value = pair.partition("=")
        if not sep or not name:
            raise ConfigError(f"override {pair!r} is not of the form name=value")
        try:
            out[name] = float(value)
        except ValueError:
            raise ConfigError(
                f"override {pair!r}: {value!r} is not a number") from None
    return out


def _load(args, overrides: dict | None = None) -> ProblemConfig:
    path = resolve_config(args.config)
    threads = args.threads if args.threads is not None else (os.cpu_count() or 1)
    solver_overrides = {
        "c1": args.c1, "c2": args.c2, "c3": args.c3,
        "root_mode": args.root_mode, "threads": threads,
    }
    if overrides is None:
        overrides = _parse_overrides(getattr(args, "param", None))
    return load_config(path, overrides=overrides,
                       solver_overrides=solver_overrides)


def _run(cfg: ProblemConfig, levels: int):
    hierarchy = cfg.spec.build_hierarchy(levels)
    if cfg.kind == "system":
        sets = solve_system(cfg.spec, hierarchy, cfg.solver)
    else:
        sets = cbmfem_run(hierarchy, cfg.spec, cfg.solver)
    return hierarchy, sets


def _timestamp() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


# ---------------------------------------------------------------------------
# writers

def write_solutions_json(path: Path, sol_set, name: str):
    payload = {
        "name": name,
        "level": sol_set.level,
        "h": sol_set.h,
        "solutions": [],
    }
    for rec in sol_set.records:
        entry = {
            "id": rec.id,
            "parent_id": rec.parent_id,
            "guess_id": rec.guess_id,
            "residual": rec.residual_l2,
            "newton_iters": rec.newton_iters,
            "values": [float(x) for x in rec.u],
        }
        if rec.v is not None:
            entry["values_v"] = [float(x) for x in rec.v]
        payload["solutions"].append(entry)
    with path.open("w") as fh:
        json.dump(payload, fh, indent=1)
        fh.write("\n")


def load_solutions(path) -> dict:
    """Read back a solutions JSON file; values become numpy arrays."""
    with Path(path).open() as fh:
        payload = json.load(fh)
    for entry in payload["solutions"]:
        entry["values"] = np.asarray(entry["values"])
        if "values_v" in entry:
            entry["values_v"] = np.asarray(entry["values_v"])
    return payload


def write_diagnostics_csv(path: Path, sets, timestamp: str | None = None):
    import csv

    with path.open("w") as fh:
        if timestamp is not None:
            fh.write(f"# generated {timestamp}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["level", "h", "parents", "guesses_emitted",
                    "guesses_truncated", "rejected_boundedness",
                    "rejected_locality", "rejected_convergence",
                    "newton_attempts", "newton_converged", "newton_failed",
                    "solutions", "wall_seconds"])
        for s in sets:
            d = s.diagnostics
            if d is None:
                continue
            w.writerow([d.level, repr(d.h), d.parents, d.guesses_emitted,
                        d.guesses_truncated, d.rejected.get("boundedness", 0),
                        d.rejected.get("locality", 0),
                        d.rejected.get("convergence", 0), d.newton_attempts,
                        d.newton_converged, d.newton_failed, d.solutions,
                        repr(d.wall_time)])


# ---------------------------------------------------------------------------
# solve

def cmd_solve(args) -> int:
    cfg = _load(args)
    levels = args.levels if args.levels is not None else cfg.levels
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    hierarchy, sets = _run(cfg, levels)
    stamp = _timestamp()
    for sol_set in sets:
        write_solutions_json(out / f"solutions_level{sol_set.level}.json",
                             sol_set, cfg.name)
    write_diagnostics_csv(out / "diagnostics.csv", sets, stamp)

    for sol_set in sets:
        print(f"level {sol_set.level} (h={sol_set.h:g}): "
              f"{len(sol_set.records)} solutions")
    print(f"wrote {len(sets)} JSON files and diagnostics.csv to {out}")
    return _EXIT_OK if sets[-1].records else _EXIT_SOLVER


# ---------------------------------------------------------------------------
# converge

def _shooting_anchor(spec: ProblemSpec, mesh, u: np.ndarray) -> float:
    """The scalar a shooting method would tune to hit this solution."""
    order = np.argsort(mesh.nodes)
    if spec.boundary["left"].kind == "neumann":
        return float(u[order[0]])
    x0, x1 = mesh.nodes[order[0]], mesh.nodes[order[1]]
    return float((u[order[1]] - u[order[0]]) / (x1 - x0))


def _oracle_for_branches(spec, hierarchy, sets, branch_ids):
    """Shooting solutions paired to branches by their tuning scalar."""
    mesh = hierarchy[-1]
    anchors = {}
    for bid in branch_ids:
        rec = next(r for r in sets[-1].records if r.id == bid)
        anchors[bid] = _shooting_anchor(spec, mesh, rec.u)
    lo, hi = min(anchors.values()), max(anchors.values())
    pad = 0.5 * (hi - lo) + 1.0
    roots = shooting_oracle_1d(spec, (lo - pad, hi + pad))
    if not roots:
        raise SolverError(
            f"shooting found no solutions in bracket ({lo - pad:g}, {hi + pad:g})")

    # the tuned scalar: left value under a flux condition, left slope under
    # a Dirichlet one, mirroring _shooting_anchor on the discrete side
    left_x = spec.domain.a
    if spec.boundary["left"].kind == "neumann":
        tuned = [sol.u0 for sol in roots]
    else:
        tuned = [float(sol.deriv(left_x)) for sol in roots]

    pairing = {}
    for bid, anchor in anchors.items():
        k = min(range(len(roots)), key=lambda i: abs(tuned[i] - anchor))
        if abs(tuned[k] - anchor) > 0.2 * max(1.0, abs(anchor)):
            raise SolverError(
                f"branch {bid}: no shooting solution near anchor {anchor:g}")
        pairing[bid] = roots[k]
    return pairing


def cmd_converge(args) -> int:
    cfg = _load(args)
    levels = args.levels if args.levels is not None else cfg.levels
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    hierarchy, sets = _run(cfg, levels)
    if args.branch == "all":
        branch_ids = [rec.id for rec in sets[-1].records]
    else:
        branch_ids = [int(args.branch)]
    if not branch_ids:
        print("no solutions at the finest level", file=sys.stderr)
        return _EXIT_SOLVER

    oracles = {}
    if args.mode == "oracle":
        if cfg.kind != "scalar" or cfg.spec.domain.dim != 1:
            print("oracle mode needs a 1d scalar problem", file=sys.stderr)
            return _EXIT_CONFIG
        oracles = _oracle_for_branches(cfg.spec, hierarchy, sets, branch_ids)

    stamp = _timestamp()
    traced = 0
    for bid in branch_ids:
        try:
            table = convergence_table(sets, hierarchy, bid, mode=args.mode,
                                      oracle=oracles.get(bid))
        except SolverError as exc:
            print(f"branch {bid}: not traceable ({exc})", file=sys.stderr)
            continue
        path = out / f"convergence_branch{bid}.csv"
        with path.open("w") as fh:
            table.write_csv(fh, timestamp=stamp)
        orders = table.last_orders(1)
        if orders:
            l2o, h1o = orders[-1]
            print(f"branch {bid}: L2 order {l2o:.2f}, H1 order {h1o:.2f} "
                  f"-> {path}")
        else:
            print(f"branch {bid}: table written (too few levels for orders) "
                  f"-> {path}")
        traced += 1
    return _EXIT_OK if traced else _EXIT_SOLVER


# ---------------------------------------------------------------------------
# sweep

def cmd_sweep(args) -> int:
    overrides = _parse_overrides(args.param_override)
    cfg = _load(args, overrides=overrides)
    levels = args.levels if args.levels is not None else cfg.levels
    name = args.sweep_param
    if name not in cfg.parameters:
        known = ", ".join(sorted(cfg.parameters)) or "(none)"
        print(f"unknown sweep parameter {name!r}; this problem defines: "
              f"{known}", file=sys.stderr)
        return _EXIT_CONFIG
    try:
        values = [float(v) for v in args.values.split(",") if v.strip()]
    except ValueError:
        print(f"--values must be a comma-separated number list, got "
              f"{args.values!r}", file=sys.stderr)
        return _EXIT_CONFIG
    if not values:
        print("--values: no values given", file=sys.stderr)
        return _EXIT_CONFIG

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def make_spec(value):
        return cfg.rebuild(**{name: value}).spec

    try:
        trace = parameter_sweep(make_spec, values, max_level=levels,
                                cfg=cfg.solver, param=name)
    except ValueError as exc:
        print(str(exc), file=sys.stderr)
        return _EXIT_CONFIG

    path = out / f"sweep_{name}.csv"
    with path.open("w") as fh:
        trace.write_csv(fh, timestamp=_timestamp())
    for value, count in zip(trace.values, trace.counts):
        print(f"{name} = {value:g}: {count} solutions")
    for value, message in trace.failures:
        print(f"{name} = {value:g}: failed ({message})", file=sys.stderr)
    print(f"wrote {path}")
    return _EXIT_OK if trace.counts else _EXIT_SOLVER


# ---------------------------------------------------------------------------
# entry point

def _add_common(sub: argparse.ArgumentParser, override_flag: bool = True):
    sub.add_argument("config", help="config file path or packaged preset name")
    sub.add_argument("--levels", type=int, default=None,
                     help="refinement depth (default: the config's levels)")
    sub.add_argument("--out", default="cbmfem_out",
                     help="output directory (default: %(default)s)")
    sub.add_argument("--threads", type=int, default=None,
                     help="parallel Newton workers (default: config/serial)")
    sub.add_argument("--root-mode", choices=("real_only", "real_parts"),
                     default=None, help="companion root handling")
    sub.add_argument("--c1", type=float, default=None, help="locality bound")
    sub.add_argument("--c2", type=float, default=None, help="convergence bound")
    sub.add_argument("--c3", type=float, default=None, help="boundedness bound")
    if override_flag:
        sub.add_argument("-p", "--param", action="append", metavar="NAME=VALUE",
                         help="override a named parameter (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cbmfem",
        description="Multiple-solution finite element solver for semilinear "
                    "elliptic problems")
    subs = parser.add_subparsers(dest="command", required=True)

    solve = subs.add_parser("solve", help="run the multilevel pipeline")
    _add_common(solve)
    solve.set_defaults(func=cmd_solve)

    conv = subs.add_parser("converge", help="error-vs-h table per branch")
    _add_common(conv)
    conv.add_argument("--branch", default="all",
                      help="branch id at the finest level, or 'all'")
    conv.add_argument("--mode", choices=("asymptotic", "oracle"),
                      default="asymptotic",
                      help="error reference (oracle: 1d shooting solution)")
    conv.set_defaults(func=cmd_converge)

    sweep = subs.add_parser("sweep", help="run over a monotone parameter grid")
    _add_common(sweep, override_flag=False)
    sweep.add_argument("-p", action="append", dest="param_override",
                       metavar="NAME=VALUE",
                       help="override a named parameter (repeatable)")
    sweep.add_argument("--param", required=True, dest="sweep_param",
                       metavar="NAME", help="the parameter to sweep")
    sweep.add_argument("--values", required=True,
                       help="comma-separated monotone value list")
    sweep.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return _EXIT_CONFIG
    except SolverError as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return _EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
