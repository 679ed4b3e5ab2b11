"""Problem definitions from TOML files.

A config describes the equation in load form,

    -lap(u) = sum_k coef_k(x) * u^k  +  rhs(x),

with boundary conditions per segment, named parameters, solver settings and
a default refinement depth.  Two-field models replace the term list with a
[system] section naming a built-in kinetics.  Any numeric field may be a
string holding an arithmetic expression over the [parameters] names, so a
single file covers a parameter family and the command line can override
individual values.
"""

from __future__ import annotations

import ast
from dataclasses import dataclass, replace
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:
    import tomli as tomllib

from .multilevel import FilterConfig
from .nonlinearity import (
    BCond,
    BoundarySpec,
    PolyNonlinearity,
    ProblemSpec,
    coef_fn,
    dirichlet,
    interval,
    neumann,
    robin,
    unit_square,
)
from .systems import TwoFieldSpec


class ConfigError(Exception):
    """Config parse or validation failure; str() is file/line anchored."""

    def __init__(self, message: str, path=None, line=None):
        self.message = message
        self.path = str(path) if path else None
        self.line = line
        prefix = ""
        if self.path:
            prefix = f"{self.path}:{line}: " if line else f"{self.path}: "
        super().__init__(prefix + message)


def _find_line(text: str, token: str):
    """Best-effort line anchor: first line where the bare key appears."""
    for n, raw in enumerate(text.splitlines(), start=1):
        stripped = raw.split("#", 1)[0]
        if token in stripped:
            return n
    return None


# ---------------------------------------------------------------------------
# expression evaluation over named parameters

_ALLOWED_BINOPS = (ast.Add, ast.Sub, ast.Mult, ast.Div, ast.Pow)


def _eval_expr(expr: str, params: dict, where: str, src):
    try:
        tree = ast.parse(expr, mode="eval")
    except SyntaxError as exc:
        raise ConfigError(
            f"bad expression {expr!r} at {where}: {exc.msg}",
            path=src.path, line=_find_line(src.text, expr)) from None
    for node in ast.walk(tree):
        if isinstance(node, (ast.Expression, ast.UnaryOp, ast.UAdd, ast.USub,
                             ast.Load)):
            continue
        if isinstance(node, ast.BinOp) and isinstance(node.op, _ALLOWED_BINOPS):
            continue
        if isinstance(node, _ALLOWED_BINOPS):
            continue
        if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)):
            continue
        if isinstance(node, ast.Name):
            if node.id not in params:
                raise ConfigError(
                    f"parameter {node.id!r} is not defined (needed at {where})",
                    path=src.path, line=_find_line(src.text, expr))
            continue
        raise ConfigError(
            f"expression {expr!r} at {where} uses unsupported syntax "
            f"({type(node).__name__}); only + - * / ** and parameter names "
            f"are allowed",
            path=src.path, line=_find_line(src.text, expr))
    return float(eval(compile(tree, "<config>", "eval"),
                      {"__builtins__": {}}, dict(params)))


def _number(value, params, where, src) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float, str)):
        raise ConfigError(f"{where} must be a number or parameter expression, "
                          f"got {value!r}", path=src.path,
                          line=_find_line(src.text, where.split(".")[-1]))
    if isinstance(value, str):
        return _eval_expr(value, params, where, src)
    return float(value)


# ---------------------------------------------------------------------------
# schema walk

@dataclass
class _Source:
    path: str
    text: str


_TOP_KEYS = {"name", "levels", "domain", "parameters", "bc", "nonlinearity",
             "rhs", "system", "solver"}
_SOLVER_FLOATS = {"c1", "c2", "c3", "newton_tol", "dedup_tol", "imag_tol",
                  "root_dedup_tol"}
_SOLVER_INTS = {"newton_max_iter", "max_guesses_per_level", "comb_level_cap",
                "level0_sweeps", "threads"}
_COEF_KINDS = {"constant": {"c"}, "power_abs": {"c", "r"},
               "poly_x": {"coeffs"}, "sine_product": {"s"}}
_SYSTEM_KINDS = {
    "schnakenberg": ("eta", "a", "b", "d"),
    "gray_scott": ("d_a", "d_s", "mu", "rho"),
}


def _reject_unknown(table: dict, allowed, where: str, src):
    for key in table:
        if key not in allowed:
            dotted = f"{where}.{key}" if where else key
            raise ConfigError(f"unknown key {dotted!r}", path=src.path,
                              line=_find_line(src.text, key))


def _need(table: dict, key: str, where: str, src):
    if key not in table:
        raise ConfigError(f"missing required key {where}.{key}" if where
                          else f"missing required key {key}",
                          path=src.path, line=_find_line(src.text, where))
    return table[key]


@dataclass
class ProblemConfig:
    """A fully resolved problem: spec, solver settings, default depth."""

    name: str
    kind: str                    # "scalar" or "system"
    levels: int
    parameters: dict
    spec: object                 # ProblemSpec | TwoFieldSpec
    solver: FilterConfig
    path: str = ""
    _data: dict | None = None
    _src: _Source | None = None
    _param_overrides: dict | None = None
    _solver_overrides: dict | None = None

    def rebuild(self, **param_overrides) -> "ProblemConfig":
        """The same config with some named parameters replaced.

        Earlier command-line parameter and solver overrides stay in force;
        the new values win where both name the same parameter.
        """
        merged = dict(self._param_overrides or {})
        merged.update(param_overrides)
        cfg = _build(self._data, self._src, merged)
        return _apply_solver_overrides(cfg, self._solver_overrides, self.path)


def _apply_solver_overrides(cfg: "ProblemConfig", overrides: dict | None,
                            path) -> "ProblemConfig":
    clean = {k: v for k, v in (overrides or {}).items() if v is not None}
    if not clean:
        return replace(cfg, _solver_overrides=overrides)
    try:
        solver = replace(cfg.solver, **clean)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad solver override: {exc}", path=path) from None
    return replace(cfg, solver=solver, _solver_overrides=overrides)


def load_config(path, overrides: dict | None = None,
                solver_overrides: dict | None = None) -> ProblemConfig:
    """Load and validate a problem file; overrides rebind [parameters]."""
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}", path=path) from None
    src = _Source(path=str(path), text=text)
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        # tomllib messages carry "(at line N, column M)" anchors already
        raise ConfigError(f"parse error: {exc}", path=path) from None
    cfg = _build(data, src, overrides or {})
    cfg = replace(cfg, _param_overrides=dict(overrides or {}))
    return _apply_solver_overrides(cfg, solver_overrides, path)


def _build(data: dict, src: _Source, overrides: dict) -> ProblemConfig:
    _reject_unknown(data, _TOP_KEYS, "", src)

    # named parameters, declaration order, with command-line overrides
    params: dict = {}
    raw_params = data.get("parameters", {})
    if not isinstance(raw_params, dict):
        raise ConfigError("[parameters] must be a table", path=src.path,
                          line=_find_line(src.text, "parameters"))
    for key, value in raw_params.items():
        if key in overrides:
            params[key] = float(overrides[key])
        else:
            params[key] = _number(value, params, f"parameters.{key}", src)
    unknown = set(overrides) - set(raw_params)
    if unknown:
        known = ", ".join(sorted(raw_params)) or "(none)"
        raise ConfigError(
            f"unknown parameter {sorted(unknown)[0]!r}; this problem defines: "
            f"{known}", path=src.path, line=_find_line(src.text, "parameters"))

    # domain
    dom = _need(data, "domain", "", src)
    _reject_unknown(dom, {"kind", "a", "b"}, "domain", src)
    dkind = _need(dom, "kind", "domain", src)
    if dkind == "interval":
        a = _number(_need(dom, "a", "domain", src), params, "domain.a", src)
        b = _number(_need(dom, "b", "domain", src), params, "domain.b", src)
        try:
            domain = interval(a, b)
        except ValueError as exc:
            raise ConfigError(str(exc), path=src.path,
                              line=_find_line(src.text, "domain")) from None
    elif dkind == "unit_square":
        domain = unit_square()
    else:
        raise ConfigError(f"unknown domain kind {dkind!r}", path=src.path,
                          line=_find_line(src.text, str(dkind)))

    levels = data.get("levels", 4)
    if not isinstance(levels, int) or isinstance(levels, bool) or levels < 0:
        raise ConfigError("levels must be a non-negative integer",
                          path=src.path, line=_find_line(src.text, "levels"))
    name = data.get("name", Path(src.path).stem)
    if not isinstance(name, str):
        raise ConfigError("name must be a string", path=src.path,
                          line=_find_line(src.text, "name"))

    # solver settings
    solver_tab = data.get("solver", {})
    _reject_unknown(solver_tab, _SOLVER_FLOATS | _SOLVER_INTS | {"root_mode"},
                    "solver", src)
    kwargs = {}
    for key, value in solver_tab.items():
        if key == "root_mode":
            if not isinstance(value, str):
                raise ConfigError("solver.root_mode must be a string",
                                  path=src.path,
                                  line=_find_line(src.text, "root_mode"))
            kwargs[key] = value
        elif key in _SOLVER_INTS:
            kwargs[key] = int(_number(value, params, f"solver.{key}", src))
        else:
            kwargs[key] = _number(value, params, f"solver.{key}", src)
    try:
        solver = FilterConfig(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"bad solver settings: {exc}", path=src.path,
                          line=_find_line(src.text, "solver")) from None

    if "system" in data:
        if "nonlinearity" in data or "rhs" in data:
            raise ConfigError(
                "[system] excludes [nonlinearity] and [rhs]; a two-field "
                "model defines its own terms", path=src.path,
                line=_find_line(src.text, "system"))
        spec = _build_system(data["system"], domain, params, src)
        kind = "system"
    else:
        spec = _build_scalar(data, domain, params, src, name)
        kind = "scalar"

    return ProblemConfig(name=name, kind=kind, levels=levels,
                         parameters=params, spec=spec, solver=solver,
                         path=src.path, _data=data, _src=src)


def _build_system(tab: dict, domain, params: dict, src) -> TwoFieldSpec:
    _reject_unknown(tab, {"kind"}, "system", src)
    kind = _need(tab, "kind", "system", src)
    if kind not in _SYSTEM_KINDS:
        known = ", ".join(sorted(_SYSTEM_KINDS))
        raise ConfigError(f"unknown system kind {kind!r}; available: {known}",
                          path=src.path, line=_find_line(src.text, str(kind)))
    wanted = _SYSTEM_KINDS[kind]
    missing = [k for k in wanted if k not in params]
    if missing:
        raise ConfigError(
            f"system {kind!r} needs parameters {', '.join(wanted)}; missing "
            f"{', '.join(missing)}", path=src.path,
            line=_find_line(src.text, "parameters"))
    kwargs = {k: params[k] for k in wanted}
    builder = getattr(TwoFieldSpec, kind)
    try:
        return builder(domain=domain, **kwargs)
    except ValueError as exc:
        raise ConfigError(f"bad system parameters: {exc}", path=src.path,
                          line=_find_line(src.text, "system")) from None


def _coef(tab: dict, params: dict, where: str, src, negate: bool):
    if not isinstance(tab, dict):
        raise ConfigError(f"{where} must be a table with a 'kind'",
                          path=src.path,
                          line=_find_line(src.text, where.split(".")[-1]))
    kind = _need(tab, "kind", where, src)
    if kind not in _COEF_KINDS:
        known = ", ".join(sorted(_COEF_KINDS))
        raise ConfigError(
            f"unknown coefficient kind {kind!r} at {where}; available: {known}",
            path=src.path, line=_find_line(src.text, str(kind)))
    _reject_unknown(tab, _COEF_KINDS[kind] | {"kind"}, where, src)
    kwargs = {}
    for key in _COEF_KINDS[kind]:
        value = _need(tab, key, where, src)
        if key == "coeffs":
            if not isinstance(value, list) or not value:
                raise ConfigError(f"{where}.coeffs must be a non-empty list",
                                  path=src.path,
                                  line=_find_line(src.text, "coeffs"))
            kwargs[key] = [_number(v, params, f"{where}.coeffs[{i}]", src)
                           for i, v in enumerate(value)]
        else:
            kwargs[key] = _number(value, params, f"{where}.{key}", src)
    if negate:
        # the config states the load side of -lap(u) = ..., the assembled
        # form carries it as -lap(u) + f = 0
        if kind == "poly_x":
            kwargs["coeffs"] = [-c for c in kwargs["coeffs"]]
        elif kind == "sine_product":
            kwargs["s"] = -kwargs["s"]
        else:
            kwargs["c"] = -kwargs["c"]
    try:
        return coef_fn(kind, **kwargs)
    except ValueError as exc:
        raise ConfigError(f"bad coefficient at {where}: {exc}", path=src.path,
                          line=_find_line(src.text, str(kind))) from None


def _build_scalar(data: dict, domain, params: dict, src, name) -> ProblemSpec:
    bc_tab = _need(data, "bc", "", src)
    segment_names = (("left", "right") if domain.dim == 1
                     else ("left", "right", "bottom", "top"))
    _reject_unknown(bc_tab, set(segment_names), "bc", src)
    segments = {}
    for seg in segment_names:
        entry = _need(bc_tab, seg, "bc", src)
        _reject_unknown(entry, {"kind", "value", "ratio", "g"}, f"bc.{seg}", src)
        kind = _need(entry, "kind", f"bc.{seg}", src)

        def num(key, default=0.0, entry=entry, seg=seg):
            if key not in entry:
                return default
            return _number(entry[key], params, f"bc.{seg}.{key}", src)

        if kind == "dirichlet":
            segments[seg] = dirichlet(num("value"))
        elif kind == "neumann":
            segments[seg] = neumann(num("g"))
        elif kind == "robin":
            segments[seg] = robin(num("ratio"), num("g"))
        else:
            raise ConfigError(f"unknown bc kind {kind!r} at bc.{seg}",
                              path=src.path,
                              line=_find_line(src.text, str(kind)))

    nl = _need(data, "nonlinearity", "", src)
    _reject_unknown(nl, {"terms"}, "nonlinearity", src)
    raw_terms = _need(nl, "terms", "nonlinearity", src)
    if not isinstance(raw_terms, list) or not raw_terms:
        raise ConfigError("nonlinearity.terms must be a non-empty array of "
                          "tables", path=src.path,
                          line=_find_line(src.text, "terms"))
    terms = []
    for i, term in enumerate(raw_terms):
        where = f"nonlinearity.terms[{i}]"
        _reject_unknown(term, {"power", "coef"}, where, src)
        power = _need(term, "power", where, src)
        if not isinstance(power, int) or isinstance(power, bool) or power < 0:
            raise ConfigError(f"{where}.power must be an integer >= 0",
                              path=src.path, line=_find_line(src.text, "power"))
        terms.append((power, _coef(_need(term, "coef", where, src), params,
                                   f"{where}.coef", src, negate=True)))
    if "rhs" in data:
        powers = {k for k, _ in terms}
        if 0 in powers:
            raise ConfigError(
                "rhs duplicates a power-0 term already in nonlinearity.terms",
                path=src.path, line=_find_line(src.text, "rhs"))
        terms.append((0, _coef(data["rhs"], params, "rhs", src, negate=True)))

    try:
        return ProblemSpec(domain=domain, boundary=BoundarySpec(segments),
                           f=PolyNonlinearity(terms), name=name)
    except ValueError as exc:
        raise ConfigError(str(exc), path=src.path) from None
