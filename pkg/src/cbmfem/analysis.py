"""Convergence rates, parameter sweeps, and an independent shooting oracle.

Observed orders come from errors between consecutive nested levels: with P1
elements the interpolant of the coarse solution lives in the fine space, so
e = u_fine - interpolate(u_coarse) measures exactly the function-space
difference.  The expected decays are O(h^2) in L2 and O(h) in H1, so the
log2 ratio of consecutive errors approaches 2 and 1.

The shooting oracle solves the same two-point problems by a method with
nothing in common with the finite element pipeline (fixed-step RK4 plus a
scalar root find on the boundary mismatch), which makes it a genuine
cross-check for the 1D examples.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .assembly import energy_norms
from .mesh import MeshLevel
from .multilevel import FilterConfig, SolutionRecord, SolutionSet, SolverError, newton
from .nonlinearity import ProblemSpec

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# branch matching across levels

def match_branches(coarse_set: SolutionSet, fine_set: SolutionSet):
    """Pair fine records with the coarse records that seeded them.

    Returns (pairs, unmatched): pairs is a list of (fine_record,
    coarse_record); fine records whose parent is missing (or absent, for
    solutions born at the fine level) land in unmatched.
    """
    by_id = {rec.id: rec for rec in coarse_set.records}
    pairs = []
    unmatched = []
    for rec in fine_set.records:
        parent = by_id.get(rec.parent_id) if rec.parent_id is not None else None
        if parent is None:
            unmatched.append(rec)
        else:
            pairs.append((rec, parent))
    return pairs, unmatched


def trace_lineage(sets: list, branch: int) -> list:
    """Records of one branch on every level, finest first ancestor last.

    branch names a record id in the finest set; the walk follows parent_id
    down to level 0 and returns records ordered coarsest to finest.
    Raises SolverError when the lineage breaks.
    """
    if not sets:
        raise SolverError("no solution sets to trace")
    chain = []
    want = branch
    for s in reversed(sets):
        rec = next((r for r in s.records if r.id == want), None)
        if rec is None:
            raise SolverError(
                f"branch {branch} is not traceable: no record {want} on "
                f"level {s.level}"
            )
        chain.append(rec)
        want = rec.parent_id
        if want is None and s.level > 0:
            raise SolverError(
                f"branch {branch} is not traceable below level {s.level}; "
                f"it was first found there"
            )
    return chain[::-1]


# ---------------------------------------------------------------------------
# convergence tables

@dataclass(frozen=True)
class ConvergenceRow:
    h: float
    l2_err: float
    l2_order: float
    h1_err: float
    h1_order: float
    cpu_seconds: float


@dataclass
class ConvergenceTable:
    branch: int
    mode: str
    rows: list = field(default_factory=list)

    def last_orders(self, n: int = 3):
        """The trailing n (l2_order, h1_order) pairs, NaNs excluded."""
        rows = [r for r in self.rows if not math.isnan(r.l2_order)]
        return [(r.l2_order, r.h1_order) for r in rows[-n:]]

    def write_csv(self, stream, timestamp: str | None = None):
        if timestamp is not None:
            stream.write(f"# generated {timestamp}\n")
        w = csv.writer(stream, lineterminator="\n")
        w.writerow(["h", "l2_err", "l2_order", "h1_err", "h1_order",
                    "cpu_seconds"])
        for r in self.rows:
            w.writerow([repr(r.h), repr(r.l2_err), repr(r.l2_order),
                        repr(r.h1_err), repr(r.h1_order), repr(r.cpu_seconds)])


def _cpu_of(sol_set: SolutionSet) -> float:
    return sol_set.diagnostics.wall_time if sol_set.diagnostics else float("nan")


def convergence_table(sets: list, hierarchy: list, branch: int,
                      mode: str = "asymptotic", oracle=None,
                      interpolate_fn=None) -> ConvergenceTable:
    """Error-vs-h table for one branch.

    asymptotic mode: the error on level l is the L2/H1 size of
    u_l - I(u_{l-1}), measured on the fine mesh (rows start at level 1).
    oracle mode: the error is u_l - oracle(nodes) on every level; oracle
    must be callable on node coordinates (1D only).
    """
    from .multilevel import interpolate as _interp

    interpolate_fn = interpolate_fn or _interp
    if mode not in ("asymptotic", "oracle"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "oracle" and oracle is None:
        raise ValueError("oracle mode needs an oracle sampler")
    chain = trace_lineage(sets, branch)
    table = ConvergenceTable(branch=branch, mode=mode)
    prev_l2 = prev_h1 = None
    for lvl, (rec, mesh, s) in enumerate(zip(chain, hierarchy, sets)):
        if mode == "asymptotic":
            if lvl == 0:
                continue
            coarse = chain[lvl - 1]
            diff = rec.u - interpolate_fn(coarse.u, hierarchy[lvl - 1], mesh)
        else:
            diff = rec.u - oracle(mesh.nodes)
        l2, h1 = energy_norms(mesh, diff)
        l2_order = math.log2(prev_l2 / l2) if prev_l2 else float("nan")
        h1_order = math.log2(prev_h1 / h1) if prev_h1 else float("nan")
        table.rows.append(ConvergenceRow(
            h=mesh.h, l2_err=l2, l2_order=l2_order,
            h1_err=h1, h1_order=h1_order, cpu_seconds=_cpu_of(s),
        ))
        prev_l2, prev_h1 = l2, h1
    return table


# ---------------------------------------------------------------------------
# parameter sweeps with natural continuation

@dataclass(frozen=True)
class BranchSummary:
    anchor: float      # u at the domain's left end (1D) or centre (2D)
    sup: float
    sign_pattern: str


@dataclass
class BranchTrace:
    param: str
    values: list = field(default_factory=list)
    counts: list = field(default_factory=list)
    summaries: list = field(default_factory=list)   # list per value
    failures: list = field(default_factory=list)    # (value, message)

    def write_csv(self, stream, timestamp: str | None = None):
        if timestamp is not None:
            stream.write(f"# generated {timestamp}\n")
        w = csv.writer(stream, lineterminator="\n")
        w.writerow([self.param, "count", "branch", "anchor", "sup",
                    "sign_pattern"])
        for value, count, summaries in zip(self.values, self.counts,
                                           self.summaries):
            for k, s in enumerate(summaries):
                w.writerow([repr(value), count, k, repr(s.anchor),
                            repr(s.sup), s.sign_pattern])
        for value, message in self.failures:
            stream.write(f"# failed {self.param}={value!r}: {message}\n")


def _anchor_index(mesh: MeshLevel) -> int:
    if mesh.dim == 1:
        return int(np.argmin(mesh.nodes))
    centre = mesh.nodes.mean(axis=0)
    return int(np.argmin(np.sum((mesh.nodes - centre) ** 2, axis=1)))


def _sign_pattern(mesh: MeshLevel, u: np.ndarray) -> str:
    sup = float(np.max(np.abs(u)))
    if sup <= 1e-12:
        return "0"
    if mesh.dim == 1:
        order = np.argsort(mesh.nodes)
    else:
        order = np.lexsort((mesh.nodes[:, 0], mesh.nodes[:, 1]))
    signs = []
    for val in u[order]:
        if abs(val) <= 1e-8 * sup:
            continue
        s = "+" if val > 0 else "-"
        if not signs or signs[-1] != s:
            signs.append(s)
    return "".join(signs) or "0"


def summarize_set(mesh: MeshLevel, sol_set: SolutionSet) -> list:
    idx = _anchor_index(mesh)
    return [BranchSummary(anchor=float(rec.u[idx]),
                          sup=float(np.max(np.abs(rec.u))),
                          sign_pattern=_sign_pattern(mesh, rec.u))
            for rec in sol_set.records]


def _monotone(values) -> bool:
    if len(values) < 2:
        return True
    diffs = np.diff(np.asarray(values, dtype=float))
    return bool(np.all(diffs > 0) or np.all(diffs < 0))


def parameter_sweep(make_spec, values, max_level: int,
                    cfg: FilterConfig | None = None,
                    param: str = "param") -> BranchTrace:
    """Solve a family of problems over a monotone parameter grid.

    make_spec(value) builds the problem for one value.  Each value runs the
    standard pipeline; the previous value's fine-level solutions are then
    Newton-refined on the new problem and merged in (natural continuation),
    so branches survive across values where the fresh enumeration alone
    might lose them.  Per-value failures are recorded and skipped.
    """
    from .multilevel import ScalarLevelProblem, cbmfem_run, dedup
    from .systems import ReducedLevelProblem, TwoFieldSpec, solve_system

    if not _monotone(values):
        raise ValueError("sweep values must be strictly monotone")
    cfg = cfg or FilterConfig()
    trace = BranchTrace(param=param)
    prev_vectors: list = []
    for value in values:
        try:
            spec = make_spec(value)
            hierarchy = spec.build_hierarchy(max_level)
            if isinstance(spec, TwoFieldSpec):
                sets = solve_system(spec, hierarchy, cfg)
                problem = ReducedLevelProblem(hierarchy[-1], spec)
            else:
                sets = cbmfem_run(hierarchy, spec, cfg)
                problem = ScalarLevelProblem(hierarchy[-1], spec)
            final = sets[-1]
            records = list(final.records)
            next_id = len(records)
            for vec in prev_vectors:
                if len(vec) != hierarchy[-1].n_nodes:
                    continue  # grids differ, nothing to continue from
                guess = problem.enforce_fixed(np.array(vec))
                u, rn, iters, reason = newton(problem, guess, cfg)
                if u is None:
                    continue
                rec = SolutionRecord(id=next_id, u=u, residual_l2=rn,
                                     newton_iters=iters, parent_id=None)
                if isinstance(spec, TwoFieldSpec):
                    rec = SolutionRecord(
                        id=next_id, u=problem.u_of(u), residual_l2=rn,
                        newton_iters=iters, parent_id=None, v=u.copy())
                records.append(rec)
                next_id += 1
            if isinstance(spec, TwoFieldSpec):
                # dedup compares the reduced field
                marks = _dedup_by(problem, [r.v for r in records],
                                  cfg.dedup_tol)
                records = [r for r, keep in zip(records, marks) if keep]
            else:
                records = dedup(records, problem, cfg.dedup_tol)
            merged = SolutionSet(level=final.level, h=final.h,
                                 records=records,
                                 diagnostics=final.diagnostics)
            trace.values.append(value)
            trace.counts.append(len(records))
            trace.summaries.append(summarize_set(hierarchy[-1], merged))
            prev_vectors = ([r.v for r in records]
                            if isinstance(spec, TwoFieldSpec)
                            else [r.u for r in records])
        except SolverError as exc:
            log.warning("sweep %s=%r failed: %s", param, value, exc)
            trace.failures.append((value, str(exc)))
            prev_vectors = []
    return trace


def _dedup_by(problem, vectors: list, tol: float) -> list:
    kept: list = []
    marks = []
    for v in vectors:
        n_v = problem.l2_norm(v)
        dup = any(problem.l2_diff(v, k) <= tol * max(1.0, n_v, n_k)
                  for k, n_k in kept)
        marks.append(not dup)
        if not dup:
            kept.append((v, n_v))
    return marks


# ---------------------------------------------------------------------------
# shooting oracle for 1D two-point problems

class OracleSolution:
    """Dense solution of u'' = f(x, u) from one converged shooting run.

    Stores the RK4 trajectory and evaluates u, u' and u'' anywhere by
    cubic Hermite interpolation (u'' exactly differentiates the u'
    interpolant, so the ODE residual stays at integrator accuracy).
    """

    def __init__(self, u0: float, xs, us, ups, f):
        self.u0 = float(u0)
        self.xs = np.asarray(xs)
        self.us = np.asarray(us)
        self.ups = np.asarray(ups)
        self._f = f
        self.qs = f(self.xs, self.us)  # u'' at the knots

    def _locate(self, x):
        x = np.asarray(x, dtype=float)
        i = np.clip(np.searchsorted(self.xs, x) - 1, 0, len(self.xs) - 2)
        h = self.xs[i + 1] - self.xs[i]
        t = (x - self.xs[i]) / h
        return i, h, t

    @staticmethod
    def _hermite(t, h, y0, m0, y1, m1):
        t2, t3 = t * t, t * t * t
        return ((2 * t3 - 3 * t2 + 1) * y0 + (t3 - 2 * t2 + t) * h * m0
                + (-2 * t3 + 3 * t2) * y1 + (t3 - t2) * h * m1)

    @staticmethod
    def _hermite_deriv(t, h, y0, m0, y1, m1):
        t2 = t * t
        return ((6 * t2 - 6 * t) * y0 / h + (3 * t2 - 4 * t + 1) * m0
                + (-6 * t2 + 6 * t) * y1 / h + (3 * t2 - 2 * t) * m1)

    def __call__(self, x):
        i, h, t = self._locate(x)
        return self._hermite(t, h, self.us[i], self.ups[i],
                             self.us[i + 1], self.ups[i + 1])

    def deriv(self, x):
        i, h, t = self._locate(x)
        return self._hermite(t, h, self.ups[i], self.qs[i],
                             self.ups[i + 1], self.qs[i + 1])

    def second_deriv(self, x):
        i, h, t = self._locate(x)
        return self._hermite_deriv(t, h, self.ups[i], self.qs[i],
                                   self.ups[i + 1], self.qs[i + 1])

    def ode_residual(self, x):
        return self.second_deriv(x) - self._f(np.asarray(x, dtype=float),
                                              self(x))


_BLOWUP_CAP = 1e8


def _fast_scalar_f(spec: ProblemSpec):
    """Scalar-argument f(x, u) without array overhead where possible."""
    from .nonlinearity import Constant

    if all(isinstance(coef, Constant) for _, coef in spec.f.terms):
        terms = [(k, coef.c) for k, coef in spec.f.terms]

        def f(x, u):
            return sum(c * u**k for k, c in terms)

        return f
    per_term = [(k, coef) for k, coef in spec.f.terms]

    def f(x, u):
        return float(sum(float(coef(np.float64(x))) * u**k
                         for k, coef in per_term))

    return f


def _rk4_path(f, a: float, b: float, y0, n_steps: int):
    """Integrate (u, u')' = (u', f(x, u)) with fixed-step RK4.

    f takes and returns scalars; on blow-up the tail saturates at a huge
    value of matching sign so the boundary mismatch stays usable.
    """
    xs = np.linspace(a, b, n_steps + 1)
    h = (b - a) / n_steps
    us = np.empty(n_steps + 1)
    ups = np.empty(n_steps + 1)
    u, up = float(y0[0]), float(y0[1])
    us[0], ups[0] = u, up
    for k in range(n_steps):
        x = xs[k]
        k1u, k1p = up, f(x, u)
        k2u, k2p = up + 0.5 * h * k1p, f(x + 0.5 * h, u + 0.5 * h * k1u)
        k3u, k3p = up + 0.5 * h * k2p, f(x + 0.5 * h, u + 0.5 * h * k2u)
        k4u, k4p = up + h * k3p, f(x + h, u + h * k3u)
        u_n = u + h / 6.0 * (k1u + 2 * k2u + 2 * k3u + k4u)
        up_n = up + h / 6.0 * (k1p + 2 * k2p + 2 * k3p + k4p)
        if not (math.isfinite(u_n) and math.isfinite(up_n)) \
                or abs(u_n) > _BLOWUP_CAP:
            fill = _BLOWUP_CAP if (not math.isfinite(u_n) or u_n > 0) \
                else -_BLOWUP_CAP
            us[k + 1:] = fill
            ups[k + 1:] = 0.0
            return xs, us, ups
        u, up = u_n, up_n
        us[k + 1], ups[k + 1] = u, up
    return xs, us, ups


def _rk4_final_batch(f_vec, a: float, b: float, u0, up0, n_steps: int):
    """End values u(b) for a whole batch of starts, integrated in lockstep."""
    h = (b - a) / n_steps
    u = np.array(u0, dtype=float)
    up = np.array(up0, dtype=float)
    x = a
    for _ in range(n_steps):
        k1u, k1p = up, f_vec(x, u)
        k2u = up + 0.5 * h * k1p
        k2p = f_vec(x + 0.5 * h, u + 0.5 * h * k1u)
        k3u = up + 0.5 * h * k2p
        k3p = f_vec(x + 0.5 * h, u + 0.5 * h * k2u)
        k4u = up + h * k3p
        k4p = f_vec(x + h, u + h * k3u)
        u = u + h / 6.0 * (k1u + 2 * k2u + 2 * k3u + k4u)
        up = up + h / 6.0 * (k1p + 2 * k2p + 2 * k3p + k4p)
        bad = ~np.isfinite(u) | (np.abs(u) > _BLOWUP_CAP)
        if np.any(bad):
            u = np.where(bad, np.where(np.isfinite(u) & (u < 0),
                                       -_BLOWUP_CAP, _BLOWUP_CAP), u)
            up = np.where(bad, 0.0, up)
        x += h
    return u


def shooting_oracle_1d(spec: ProblemSpec, bracket, n_scan: int = 120,
                       rtol: float = 1e-12):
    """All two-point solutions with shooting parameter inside the bracket.

    The PDE convention -u'' + f(x, u) = 0 integrates as u'' = f(x, u).
    Supported layouts: left end u'(a)=0 (parameter is u(a)) or left end
    Dirichlet (parameter is u'(a)); right end must be Dirichlet.  Returns
    one OracleSolution per sign change of the right-boundary mismatch;
    an empty list when the bracket shows none.
    """
    if spec.domain.dim != 1:
        raise ValueError("the shooting oracle is 1D only")
    left = spec.boundary.segments["left"]
    right = spec.boundary.segments["right"]
    if right.kind != "dirichlet":
        raise ValueError("shooting needs a Dirichlet condition at the right end")
    if left.kind == "neumann" and left.g != 0.0:
        raise ValueError("only the no-flux form u'(a) = 0 is supported")
    a, b = spec.domain.a, spec.domain.b
    f = _fast_scalar_f(spec)
    f_vec = spec.f.eval_f

    if left.kind == "neumann":
        def start(theta):
            return theta, 0.0
    elif left.kind == "dirichlet":
        def start(theta):
            return left.value, theta
    else:
        raise ValueError("left end must be a no-flux or Dirichlet condition")

    n_fine = int(round(1.0 / 1e-4))          # step 1e-4 of the domain length
    n_coarse = max(200, n_fine // 10)

    def mismatch(theta, n_steps):
        _, us, _ = _rk4_path(f, a, b, start(theta), n_steps)
        return us[-1] - right.value

    # coarse scan of the whole bracket in one vectorised integration
    lo, hi = float(bracket[0]), float(bracket[1])
    thetas = np.linspace(lo, hi, n_scan + 1)
    starts = np.array([start(t) for t in thetas])
    ends = _rk4_final_batch(f_vec, a, b, starts[:, 0], starts[:, 1], n_coarse)
    coarse = ends - right.value

    roots = []
    for i in range(n_scan):
        m0, m1 = coarse[i], coarse[i + 1]
        if m0 == 0.0:
            roots.append(float(thetas[i]))
            continue
        if m0 * m1 >= 0.0:
            continue
        # bisect on the cheap integrator first
        t0, t1, f0 = float(thetas[i]), float(thetas[i + 1]), float(m0)
        for _ in range(60):
            tm = 0.5 * (t0 + t1)
            fm = mismatch(tm, n_coarse)
            if fm == 0.0:
                t0 = t1 = tm
                break
            if f0 * fm < 0.0:
                t1 = tm
            else:
                t0, f0 = tm, fm
            if abs(t1 - t0) <= 1e-9 * max(1.0, abs(t0)):
                break
        # secant polish against the accurate integrator
        ta = 0.5 * (t0 + t1)
        tb = ta + max(1e-9, 1e-9 * abs(ta))
        fa, fb = mismatch(ta, n_fine), mismatch(tb, n_fine)
        for _ in range(8):
            if fb == fa:
                break
            tc = tb - fb * (tb - ta) / (fb - fa)
            ta, fa, tb = tb, fb, tc
            fb = mismatch(tb, n_fine)
            if abs(tb - ta) <= rtol * max(1.0, abs(tb)):
                break
        roots.append(tb)

    out = []
    for theta in roots:
        xs, us, ups = _rk4_path(f, a, b, start(theta), n_fine)
        out.append(OracleSolution(u0=us[0], xs=xs, us=us, ups=ups, f=f_vec))
    return out
