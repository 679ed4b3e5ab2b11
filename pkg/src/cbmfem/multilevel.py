"""Multilevel continuation of solution sets through a mesh hierarchy.

Level 0 is solved exhaustively: with a single free node the discrete problem
IS one polynomial equation and the companion matrix delivers every root; with
a few free nodes, nonlinear Gauss-Seidel sweeps of per-node companion solves
enumerate candidate vectors.  On refined levels every coarse solution is
interpolated, each new free node gets the root set of its local polynomial
(all other values frozen at the interpolant), and the Cartesian product of
those root sets - plus the plain interpolant - forms the initial-guess pool.
Three cheap filters (boundedness, locality, convergence) prune the pool
before Newton refinement; surviving solutions are deduplicated.

Beyond `comb_level_cap` the enumeration is skipped and each solution is only
carried upward by interpolation + Newton, which is the cheap tail of the
method once the solution set has stabilised.
"""

from __future__ import annotations

import itertools
import logging
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse.linalg as spla

from . import assembly, companion
from .mesh import MeshLevel
from .nonlinearity import ProblemSpec

log = logging.getLogger(__name__)

_REJECT_REASONS = ("boundedness", "locality", "convergence")


class SolverError(RuntimeError):
    """The pipeline cannot continue (empty solution set, degenerate level 0)."""


@dataclass(frozen=True)
class FilterConfig:
    """Tuning constants for guess generation, filtering and refinement.

    The filter constants are deliberately permissive; they only have to keep
    the guess pool finite, not to be sharp.  All of them are exposed through
    the config file / CLI.
    """

    c1: float = 10.0          # locality: |F(guess)| < c1 * |F(interpolant)|
    c2: float = 100.0         # convergence: |F(guess)| < c2 * h^2
    c3: float = 100.0         # boundedness: max |guess| < c3
    newton_tol: float = 1e-10
    newton_max_iter: int = 50
    dedup_tol: float = 1e-6
    max_guesses_per_level: int = 200_000
    comb_level_cap: int = 2
    root_mode: str = "real_only"
    imag_tol: float = 1e-9
    root_dedup_tol: float = 1e-8
    level0_sweeps: int = 2
    threads: int = 1

    def __post_init__(self):
        if self.root_mode not in ("real_only", "real_parts"):
            raise ValueError(f"unknown root_mode {self.root_mode!r}")
        for name in ("c1", "c2", "c3", "newton_tol", "dedup_tol"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class SolutionRecord:
    """One discrete solution on one level."""

    id: int
    u: np.ndarray
    residual_l2: float
    newton_iters: int
    parent_id: int | None = None
    guess_id: int = 0
    v: np.ndarray | None = None  # second field for reduced systems

    def __post_init__(self):
        self.u.setflags(write=False)


@dataclass
class LevelDiagnostics:
    level: int
    h: float
    parents: int = 0
    guesses_emitted: int = 0
    guesses_truncated: int = 0
    rejected: dict = field(default_factory=lambda: {r: 0 for r in _REJECT_REASONS})
    newton_attempts: int = 0
    newton_converged: int = 0
    newton_failed: int = 0
    solutions: int = 0
    wall_time: float = 0.0


@dataclass
class SolutionSet:
    level: int
    h: float
    records: list
    diagnostics: LevelDiagnostics | None = None


# ---------------------------------------------------------------------------
# interpolation between consecutive levels

def interpolate(coarse_values: np.ndarray, coarse: MeshLevel,
                fine: MeshLevel) -> np.ndarray:
    """Prolong nodal values from a mesh level to its refinement.

    Carried-over nodes copy their value; each new node gets the mean of its
    edge endpoints, which is exact piecewise-linear interpolation.
    """
    if fine.level != coarse.level + 1 or len(fine.coarse_nodes) != coarse.n_nodes:
        raise ValueError("interpolate needs consecutive levels of one hierarchy")
    out = np.empty(fine.n_nodes)
    out[fine.coarse_nodes] = coarse_values
    ep = fine.new_node_endpoints
    if len(ep):
        out[fine.new_nodes] = 0.5 * (out[ep[:, 0]] + out[ep[:, 1]])
    return out


# ---------------------------------------------------------------------------
# level problems: the driver only relies on this small surface, which lets
# the reduced two-field systems reuse the whole pipeline

class ScalarLevelProblem:
    """Discrete -lap(u) + f(x,u) = 0 on one mesh level."""

    def __init__(self, mesh: MeshLevel, spec: ProblemSpec):
        self.mesh = mesh
        self.spec = spec
        self.asm = assembly.get_assembler(mesh, spec)
        self.free = mesh.free_nodes
        self.new_free = mesh.new_free_nodes
        self.h = mesh.h
        nq = self.asm.tables.n_quad
        self.chunk_size = max(64, min(8192, 2_000_000 // max(1, mesh.n_elements * nq)))
        self._fixed_values = spec.dirichlet_values(mesh)
        self._fixed_mask = np.ones(mesh.n_nodes, dtype=bool)
        self._fixed_mask[self.free] = False

    def base_values(self) -> np.ndarray:
        return self._fixed_values.copy()

    def enforce_fixed(self, u: np.ndarray) -> np.ndarray:
        u[self._fixed_mask] = self._fixed_values[self._fixed_mask]
        return u

    def residual_free(self, u):
        return self.asm.residual(u)

    def residual_batch(self, U):
        return self.asm.residual_batch(U)

    def residual_norm(self, rvec):
        return self.asm.norm(rvec)

    def jacobian_free(self, u):
        return self.asm.jacobian(u)

    def solve_linear(self, J, rhs):
        return spla.spsolve(J.tocsc(), rhs)

    def local_poly(self, frozen, i):
        return companion.local_polynomial(self.mesh, self.spec, frozen, i)

    def l2_norm(self, u):
        return assembly.energy_norms(self.mesh, u)[0]

    def l2_diff(self, u, v):
        return assembly.energy_norms(self.mesh, u, v)[0]


# ---------------------------------------------------------------------------
# guess generation

def _root_candidates(problem, frozen, i, cfg: FilterConfig):
    """Real root candidates for node i, bounded by c3; None if degenerate."""
    try:
        poly = problem.local_poly(frozen, i)
        roots = companion.poly_roots(poly)
    except companion.DegeneratePolynomialError:
        return None
    vals = companion.real_roots(
        roots, mode=cfg.root_mode, imag_tol=cfg.imag_tol,
        dedup_tol=cfg.root_dedup_tol,
    )
    vals = vals[np.abs(vals) < cfg.c3]  # doomed by boundedness anyway
    return vals


def enumerate_guesses(problem, interp: np.ndarray, cfg: FilterConfig):
    """Initial guesses for one interpolated coarse solution.

    Yields (guess_id, values): id 0 is the interpolant itself, the rest walk
    the Cartesian product of the per-node root sets in lexicographic order
    (nodes in index order, each root set sorted ascending).  Product entries
    that coincide with the interpolant are skipped.
    """
    yield 0, interp
    root_sets = []
    for i in problem.new_free:
        vals = _root_candidates(problem, interp, i, cfg)
        if vals is None or len(vals) == 0:
            vals = np.array([interp[i]])  # keep the interpolated value
        root_sets.append(vals)
    if not root_sets:
        return
    nodes = problem.new_free
    guess_id = 1
    for combo in itertools.product(*root_sets):
        values = np.array(combo)
        if np.array_equal(values, interp[nodes]):
            continue
        g = interp.copy()
        g[nodes] = values
        yield guess_id, g
        guess_id += 1


def count_product_guesses(problem, interp, cfg) -> int:
    """Size of the guess pool for one parent (interpolant included)."""
    total = 1
    for i in problem.new_free:
        vals = _root_candidates(problem, interp, i, cfg)
        total *= max(1, 0 if vals is None else len(vals))
    return total + 1


# ---------------------------------------------------------------------------
# filters

def _filter_batch(problem, U: np.ndarray, interp_norm: float, cfg: FilterConfig):
    """Vectorised filter pass; returns (accept mask, reason per guess)."""
    nb = U.shape[0]
    reasons = np.zeros(nb, dtype=np.int8)  # 0 = accepted
    alive = np.max(np.abs(U), axis=1) < cfg.c3
    reasons[~alive] = 1
    norms = np.full(nb, np.inf)
    if np.any(alive):
        res = problem.residual_batch(U[alive])
        scale = math.sqrt(problem.mesh.h**problem.mesh.dim)
        norms[alive] = scale * np.linalg.norm(res, axis=1)
    # when the interpolant is itself a converged solution (exactly
    # representable coarse solutions: zero states, constants) the locality
    # ratio is degenerate and would reject every new guess; boundedness and
    # convergence alone vet the guesses in that case
    if interp_norm > cfg.newton_tol:
        bad_local = alive & ~((norms < cfg.c1 * interp_norm) | (norms == 0.0))
        reasons[bad_local] = 2
        alive &= ~bad_local
    bad_conv = alive & ~(norms < cfg.c2 * problem.h**2)
    reasons[bad_conv] = 3
    alive &= ~bad_conv
    return alive, reasons


def apply_filters(guess, interp, mesh: MeshLevel, spec: ProblemSpec,
                  cfg: FilterConfig):
    """Check one guess against the boundedness/locality/convergence filters.

    Returns (accepted, reason); reason names the first failed filter.
    """
    problem = ScalarLevelProblem(mesh, spec)
    interp_norm = problem.residual_norm(problem.residual_free(interp))
    alive, reasons = _filter_batch(problem, np.asarray(guess)[None, :],
                                   interp_norm, cfg)
    if alive[0]:
        return True, None
    return False, _REJECT_REASONS[reasons[0] - 1]


# ---------------------------------------------------------------------------
# newton refinement

def newton(problem, guess: np.ndarray, cfg: FilterConfig):
    """Damped Newton iteration on the free nodes.

    Returns (values, scaled residual norm, iterations, None) on success and
    (None, None, iterations, reason) on failure; failures never raise.
    """
    u = problem.enforce_fixed(np.array(guess, dtype=float))
    r = problem.residual_free(u)
    rn = problem.residual_norm(r)
    if not np.isfinite(rn):
        return None, None, 0, "nan"
    for it in range(cfg.newton_max_iter):
        if rn < cfg.newton_tol:
            return u, rn, it, None
        J = problem.jacobian_free(u)
        try:
            delta = problem.solve_linear(J, -r)
        except Exception:
            return None, None, it, "singular"
        if not np.all(np.isfinite(delta)):
            return None, None, it, "singular"
        lam = 1.0
        for _ in range(11):
            trial = u.copy()
            trial[problem.free] += lam * delta
            r_t = problem.residual_free(trial)
            rn_t = problem.residual_norm(r_t)
            if np.isfinite(rn_t) and rn_t < rn:
                u, r, rn = trial, r_t, rn_t
                break
            lam *= 0.5
        else:
            return None, None, it, "stalled"
    return None, None, cfg.newton_max_iter, "max_iter"


# ---------------------------------------------------------------------------
# deduplication

def dedup(records: list, problem, tol: float) -> list:
    """Greedy first-arrival dedup by relative L2 distance."""
    kept = []
    norms = []
    for rec in records:
        n_rec = problem.l2_norm(rec.u)
        dup = False
        for other, n_other in zip(kept, norms):
            dist = problem.l2_diff(rec.u, other.u)
            if dist <= tol * max(1.0, n_rec, n_other):
                dup = True
                break
        if not dup:
            kept.append(rec)
            norms.append(n_rec)
    return kept


# ---------------------------------------------------------------------------
# level 0

def solve_level0(problem, cfg: FilterConfig) -> SolutionSet:
    """Exhaustive companion-based solve on the coarsest level."""
    t0 = time.perf_counter()
    diag = LevelDiagnostics(level=0, h=problem.h)
    free = problem.free
    if len(free) == 0:
        raise SolverError("level 0 has no free nodes")
    base = problem.base_values()
    if len(free) == 1:
        i = free[0]
        vals = _root_candidates(problem, base, i, cfg)
        if vals is None:
            raise SolverError(
                "level-0 local polynomial is degenerate; the problem has no "
                "polynomial structure at the single free node"
            )
        candidates = []
        for r in vals:
            c = base.copy()
            c[i] = r
            candidates.append(c)
    else:
        candidates = [base]
        for _ in range(cfg.level0_sweeps):
            for i in free:
                nxt = []
                for cand in candidates:
                    vals = _root_candidates(problem, cand, i, cfg)
                    if vals is None or len(vals) == 0:
                        nxt.append(cand)
                        continue
                    for r in vals:
                        c = cand.copy()
                        c[i] = r
                        nxt.append(c)
                    if len(nxt) >= cfg.max_guesses_per_level:
                        diag.guesses_truncated += 1
                        break
                candidates = nxt[: cfg.max_guesses_per_level]
            candidates = _dedup_vectors(candidates, cfg.root_dedup_tol)
    diag.guesses_emitted = len(candidates)

    records = []
    for gid, cand in enumerate(candidates):
        u, rn, iters, reason = newton(problem, cand, cfg)
        diag.newton_attempts += 1
        if u is None:
            diag.newton_failed += 1
            continue
        diag.newton_converged += 1
        records.append(SolutionRecord(
            id=len(records), u=u, residual_l2=rn, newton_iters=iters,
            parent_id=None, guess_id=gid,
        ))
    records = dedup(records, problem, cfg.dedup_tol)
    records = [replace(r, id=k) for k, r in enumerate(records)]
    if not records:
        raise SolverError(
            "no solutions on level 0; raise c3 / max_guesses_per_level or "
            "check the problem data"
        )
    diag.solutions = len(records)
    diag.wall_time = time.perf_counter() - t0
    return SolutionSet(level=0, h=problem.h, records=records, diagnostics=diag)


def _dedup_vectors(vectors: list, tol: float) -> list:
    kept = []
    for v in vectors:
        scale = max(1.0, float(np.max(np.abs(v))))
        if any(np.max(np.abs(v - k)) <= tol * scale for k in kept):
            continue
        kept.append(v)
    return kept


# ---------------------------------------------------------------------------
# the multilevel driver

def run_multilevel(problems: list, cfg: FilterConfig) -> list:
    """Run the full pipeline over a list of per-level problems."""
    sets = [solve_level0(problems[0], cfg)]
    for lvl in range(1, len(problems)):
        prob = problems[lvl]
        prev = sets[-1]
        t0 = time.perf_counter()
        diag = LevelDiagnostics(level=lvl, h=prob.h, parents=len(prev.records))
        enumerate_mode = lvl <= cfg.comb_level_cap
        n_parents = len(prev.records)
        quota = None
        if enumerate_mode:
            quota = max(0, (cfg.max_guesses_per_level - n_parents) // n_parents)

        raw_records = []
        for parent in prev.records:
            interp = prob.enforce_fixed(
                interpolate(parent.u, problems[lvl - 1].mesh, prob.mesh)
            )
            if not enumerate_mode:
                diag.guesses_emitted += 1
                _newton_into(prob, [(0, interp)], parent.id, cfg, diag, raw_records)
                continue
            interp_norm = prob.residual_norm(prob.residual_free(interp))
            pool = enumerate_guesses(prob, interp, cfg)
            emitted = 0
            while True:
                room = quota + 1 - emitted
                if room <= 0:
                    if next(pool, None) is not None:
                        diag.guesses_truncated += 1
                        log.warning(
                            "level %d: guess pool for parent %d truncated at "
                            "%d; raise max_guesses_per_level to search further",
                            lvl, parent.id, emitted,
                        )
                    break
                batch = list(itertools.islice(pool, min(prob.chunk_size, room)))
                if not batch:
                    break
                emitted += len(batch)
                ids = [gid for gid, _ in batch]
                U = np.array([g for _, g in batch])
                alive, reasons = _filter_batch(prob, U, interp_norm, cfg)
                for code, name in enumerate(_REJECT_REASONS, start=1):
                    diag.rejected[name] += int(np.sum(reasons == code))
                accepted = [(ids[j], U[j]) for j in np.flatnonzero(alive)]
                _newton_into(prob, accepted, parent.id, cfg, diag, raw_records)
            diag.guesses_emitted += emitted

        records = dedup(raw_records, prob, cfg.dedup_tol)
        records = [replace(r, id=k) for k, r in enumerate(records)]
        if not records:
            raise SolverError(
                f"solution set became empty at level {lvl}; relax the filter "
                f"constants (c1/c2/c3) or raise max_guesses_per_level"
            )
        diag.solutions = len(records)
        diag.wall_time = time.perf_counter() - t0
        sets.append(SolutionSet(level=lvl, h=prob.h, records=records,
                                diagnostics=diag))
        log.info("level %d: %d solutions from %d guesses (%.2fs)",
                 lvl, diag.solutions, diag.guesses_emitted, diag.wall_time)
    return sets


def _newton_into(problem, guesses, parent_id, cfg, diag, out):
    """Newton-refine filtered guesses, in order, appending successes."""
    if cfg.threads > 1 and len(guesses) > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            results = list(pool.map(
                lambda g: newton(problem, g[1], cfg), guesses
            ))
    else:
        results = [newton(problem, g, cfg) for _, g in guesses]
    for (gid, _), (u, rn, iters, reason) in zip(guesses, results):
        diag.newton_attempts += 1
        if u is None:
            diag.newton_failed += 1
            continue
        diag.newton_converged += 1
        out.append(SolutionRecord(
            id=-1, u=u, residual_l2=rn, newton_iters=iters,
            parent_id=parent_id, guess_id=gid,
        ))


def cbmfem_run(hierarchy: list, spec: ProblemSpec,
               cfg: FilterConfig | None = None) -> list:
    """Solve a scalar problem over a mesh hierarchy.

    Returns one SolutionSet per level; records carry the lineage
    (parent_id, guess_id) that produced them.
    """
    cfg = cfg or FilterConfig()
    problems = [ScalarLevelProblem(mesh, spec) for mesh in hierarchy]
    return run_multilevel(problems, cfg)
