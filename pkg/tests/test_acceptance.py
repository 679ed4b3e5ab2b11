"""Acceptance gate for the whole package.

One test per criterion, each ending in a single printed verdict line
(visible with -v as the test outcome, with -s as the printed line).
The heavy solver runs are shared through module-scoped fixtures; each
criterion that carries a runtime bound times its own run.
"""

import time

import numpy as np
import pytest

from cbmfem.analysis import convergence_table, shooting_oracle_1d
from cbmfem.assembly import energy_norms, residual, residual_norm
from cbmfem.companion import poly_roots
from cbmfem.mesh import NodeTag
from cbmfem.multilevel import ScalarLevelProblem, cbmfem_run, interpolate, newton
from cbmfem.problems import PRESETS, get_preset
from cbmfem.systems import ReducedLevelProblem, solve_system

RNG_SEED = 20260817


def _timed_run(name: str, levels: int, **params):
    pre = get_preset(name)
    spec = pre.spec(**params)
    hier = spec.build_hierarchy(levels)
    t0 = time.perf_counter()
    if pre.kind == "system":
        sets = solve_system(spec, hier, pre.solver)
    else:
        sets = cbmfem_run(hier, spec, pre.solver)
    return pre, spec, hier, sets, time.perf_counter() - t0


@pytest.fixture(scope="module")
def ex1_run():
    return _timed_run("ex1", 6)          # h = 2^-7 on [0, 1]


@pytest.fixture(scope="module")
def ex2_run():
    return _timed_run("ex2", 6)


@pytest.fixture(scope="module")
def ex3p7_run():
    return _timed_run("ex3", 6)


@pytest.fixture(scope="module")
def ex4_run():
    return _timed_run("ex4", 7)          # h = 2^-7 on [-1, 1]


@pytest.fixture(scope="module")
def sch_run():
    return _timed_run("schnakenberg", 6)


@pytest.fixture(scope="module")
def sine2d_run():
    return _timed_run("sine2d", 3)       # h = 2^-3 on the unit square


def _window_orders(table):
    """Observed orders over the last three levels.

    Three meshes give two consecutive error ratios; their mean is the
    least-squares slope of log(err) against log(h) over that window.
    """
    rows = [r for r in table.rows if not np.isnan(r.l2_order)]
    assert len(rows) >= 2
    last = rows[-2:]
    return (sum(r.l2_order for r in last) / 2.0,
            sum(r.h1_order for r in last) / 2.0)


# ---------------------------------------------------------------------------
# 1. the quartic two-solution problem at h = 2^-7

def test_criterion_1_two_solutions_with_oracle_left_values(ex1_run):
    pre, spec, hier, sets, secs = ex1_run
    mesh = hier[-1]
    assert mesh.h == pytest.approx(2.0 ** -7)
    finest = sets[-1]
    assert len(finest.records) == 2

    i0 = int(np.argmin(mesh.nodes))  # the free end at x = 0
    got = sorted(float(rec.u[i0]) for rec in finest.records)
    assert abs(got[0] - 0.5227) <= 2e-3
    assert abs(got[1] - 1.3084) <= 2e-3
    assert secs < 60.0
    print(f"criterion 1: PASS (2 solutions, u(0) = {got[0]:.4f}/{got[1]:.4f}, "
          f"{secs:.1f}s)")


# ---------------------------------------------------------------------------
# 2. convergence orders for the five study problems

def _check_study(label, run, deadline=120.0):
    pre, spec, hier, sets, secs = run
    assert secs < deadline, f"{label}: run took {secs:.1f}s"
    checked = 0
    for rec in sets[-1].records:
        table = convergence_table(sets, hier, rec.id)
        if table.rows[-1].l2_err <= 1e-10:
            continue  # constant or zero branch: error sits at rounding level
        l2o, h1o = _window_orders(table)
        assert abs(l2o - 2.0) <= 0.1, f"{label} branch {rec.id}: L2 {l2o:.3f}"
        assert abs(h1o - 1.0) <= 0.1, f"{label} branch {rec.id}: H1 {h1o:.3f}"
        fin_l2, fin_h1 = table.last_orders(1)[-1]
        assert abs(fin_l2 - 2.0) <= 0.1
        assert abs(fin_h1 - 1.0) <= 0.1
        checked += 1
    assert checked > 0
    return checked, secs


def test_criterion_2_convergence_orders(ex1_run, ex2_run, ex3p7_run, ex4_run,
                                        sch_run):
    parts = []
    for label, run in [("ex1", ex1_run), ("ex2", ex2_run),
                       ("ex3 p=7", ex3p7_run), ("ex4", ex4_run),
                       ("schnakenberg", sch_run)]:
        n, secs = _check_study(label, run)
        parts.append(f"{label}: {n} branches {secs:.1f}s")
    print("criterion 2: PASS (L2 2.00+-0.1, H1 1.00+-0.1; "
          + "; ".join(parts) + ")")


# ---------------------------------------------------------------------------
# 3. exact solution counts at h = 2^-6

def test_criterion_3_solution_counts(ex3p7_run, ex4_run, sch_run):
    # level 5 on [0, 1] and level 6 on [-1, 1] both sit at h = 2^-6
    counts = {}
    for p, expected in ((1.0, 2), (18.0, 8)):
        _, _, hier, sets, _ = _timed_run("ex3", 5, p=p)
        assert hier[5].h == pytest.approx(2.0 ** -6)
        counts[f"p={p:g}"] = len(sets[5].records)
        assert len(sets[5].records) == expected

    _, _, hier7, sets7, _ = ex3p7_run
    assert hier7[5].h == pytest.approx(2.0 ** -6)
    counts["p=7"] = len(sets7[5].records)
    assert len(sets7[5].records) == 4

    _, _, hier_s, sets_s, _ = sch_run
    assert hier_s[5].h == pytest.approx(2.0 ** -6)
    counts["schnakenberg"] = len(sets_s[5].records)
    assert len(sets_s[5].records) == 3

    _, _, hier4, sets4, _ = ex4_run
    assert hier4[6].h == pytest.approx(2.0 ** -6)
    nonneg = [rec for rec in sets4[6].records
              if float(np.min(rec.u)) >= -1e-8 * max(1.0, float(np.max(np.abs(rec.u))))]
    counts["ex4 nonneg"] = len(nonneg)
    assert len(nonneg) == 4

    print("criterion 3: PASS ("
          + ", ".join(f"{k}: {v}" for k, v in counts.items()) + ")")


# ---------------------------------------------------------------------------
# 4. the 2D forced problem at s = 1600

def _square_symmetry_perms(mesh):
    """Node permutations for the reflections of the unit square."""
    def key(p):
        return (round(p[0] * 4096), round(p[1] * 4096))

    index = {key(p): i for i, p in enumerate(mesh.nodes)}

    def perm(transform):
        return np.array([index[key(transform(p))] for p in mesh.nodes])

    px = perm(lambda p: (1.0 - p[0], p[1]))
    py = perm(lambda p: (p[0], 1.0 - p[1]))
    pt = perm(lambda p: (p[1], p[0]))
    return px, py, pt


def test_criterion_4_forced_2d_counts_and_classes(sine2d_run):
    pre, spec, hier, sets, secs = sine2d_run
    assert hier[-1].h == pytest.approx(2.0 ** -3)
    assert len(sets[0].records) == 2
    assert len(sets[-1].records) == 10
    assert secs < 600.0

    # distinct solutions up to the symmetries of the square: both axis
    # reflections plus the diagonal swap that the symmetric forcing admits
    mesh = hier[-1]
    prob = ScalarLevelProblem(mesh, spec)
    px, py, pt = _square_symmetry_perms(mesh)
    group = []
    for flip_t in (False, True):
        for flip_x in (False, True):
            for flip_y in (False, True):
                def apply(u, fx=flip_x, fy=flip_y, ft=flip_t):
                    if ft:
                        u = u[pt]
                    if fx:
                        u = u[px]
                    if fy:
                        u = u[py]
                    return u
                group.append(apply)

    reps = []
    for rec in sets[-1].records:
        variants = [g(rec.u) for g in group]
        hit = any(prob.l2_diff(v, rep) <= 1e-6 * max(prob.l2_norm(rep), 1.0)
                  for rep in reps for v in variants)
        if not hit:
            reps.append(rec.u)
    assert len(reps) == 4
    print(f"criterion 4: PASS (2 at level 0, 10 at h=1/8, "
          f"4 symmetry classes, {secs:.1f}s)")


# ---------------------------------------------------------------------------
# 5. property suite

def _fd_jacobian_check(problem, states, free, rng):
    """Directional finite-difference probe of the assembled Jacobian."""
    eps = 1e-6
    for u in states:
        J = problem.jacobian_free(u)
        w = rng.normal(size=len(free)) if free is not None else rng.normal(size=len(u))
        if free is not None:
            up, um = u.copy(), u.copy()
            up[free] += eps * w
            um[free] -= eps * w
        else:
            up, um = u + eps * w, u - eps * w
        fd = (problem.residual_free(up) - problem.residual_free(um)) / (2 * eps)
        Jw = J @ w
        denom = max(float(np.linalg.norm(Jw)), 1e-12)
        assert float(np.linalg.norm(Jw - fd)) / denom <= 1e-5


def test_criterion_5_property_suite(sine2d_run):
    t0 = time.perf_counter()
    rng = np.random.default_rng(RNG_SEED)

    # (a) companion roots of pipeline-local polynomials, scaled residuals
    for name in sorted(PRESETS):
        pre = get_preset(name)
        spec = pre.spec()
        mesh = spec.build_hierarchy(0)[0]
        if pre.kind == "system":
            problem = ReducedLevelProblem(mesh, spec)
        else:
            problem = ScalarLevelProblem(mesh, spec)
        frozen = problem.base_values()
        for i in mesh.free_nodes:
            rs = poly_roots(problem.local_poly(frozen, int(i)))
            assert float(np.max(rs.residuals())) <= 1e-8

    # (b) Jacobian vs finite differences, 10 random states per preset
    for name in sorted(PRESETS):
        pre = get_preset(name)
        spec = pre.spec()
        mesh = spec.build_hierarchy(2)[2]
        if pre.kind == "system":
            problem = ReducedLevelProblem(mesh, spec)
            states = [rng.normal(size=mesh.n_nodes) for _ in range(10)]
            _fd_jacobian_check(problem, states, None, rng)
        else:
            problem = ScalarLevelProblem(mesh, spec)
            states = []
            for _ in range(10):
                u = problem.base_values()
                u[problem.free] = rng.normal(size=len(problem.free))
                states.append(u)
            _fd_jacobian_check(problem, states, problem.free, rng)

    # (c) interpolation preserves the L2 norm exactly on nested meshes
    for name in ("ex1", "sine2d"):
        spec = get_preset(name).spec()
        hier = spec.build_hierarchy(2)
        coarse, fine = hier[1], hier[2]
        u = rng.normal(size=coarse.n_nodes)
        lifted = interpolate(u, coarse, fine)
        l2_c = energy_norms(coarse, u)[0]
        l2_f = energy_norms(fine, lifted)[0]
        assert abs(l2_c - l2_f) <= 1e-12 * max(1.0, l2_c)

    # (d) stored solutions re-assemble to their recorded residual size
    pre3 = get_preset("ex3")
    spec3 = pre3.spec()
    hier3 = spec3.build_hierarchy(3)
    for sol_set in cbmfem_run(hier3, spec3, pre3.solver):
        mesh = hier3[sol_set.level]
        for rec in sol_set.records:
            rn = residual_norm(mesh, residual(mesh, spec3, rec.u))
            assert rn <= pre3.solver.newton_tol
    pre_s = get_preset("schnakenberg")
    spec_s = pre_s.spec()
    hier_s = spec_s.build_hierarchy(3)
    for sol_set in solve_system(spec_s, hier_s, pre_s.solver):
        problem = ReducedLevelProblem(hier_s[sol_set.level], spec_s)
        for rec in sol_set.records:
            rn = problem.residual_norm(problem.residual_free(rec.v))
            assert rn <= pre_s.solver.newton_tol

    # (e) 2D solution set closes under its reflections after re-Newton
    pre2, spec2, hier2, sets2, _ = sine2d_run
    mesh2 = hier2[-1]
    prob2 = ScalarLevelProblem(mesh2, spec2)
    px, py, _ = _square_symmetry_perms(mesh2)
    for rec in sets2[-1].records:
        for perm in (px, py):
            u2, rn2, _, reason = newton(prob2, rec.u[perm].copy(), pre2.solver)
            assert reason is None
            nearest = min(
                prob2.l2_diff(u2, other.u) / max(prob2.l2_norm(other.u), 1.0)
                for other in sets2[-1].records)
            assert nearest <= pre2.solver.dedup_tol

    # (f) repeated runs are bit-identical
    again = cbmfem_run(hier3, spec3, pre3.solver)
    first = cbmfem_run(hier3, spec3, pre3.solver)
    for sa, sb in zip(first, again):
        assert len(sa.records) == len(sb.records)
        for ra, rb in zip(sa.records, sb.records):
            assert np.array_equal(ra.u, rb.u)
            assert ra.residual_l2 == rb.residual_l2

    secs = time.perf_counter() - t0
    assert secs < 60.0
    print(f"criterion 5: PASS (companion, jacobian, interpolation, "
          f"residual, symmetry, determinism; {secs:.1f}s)")


# ---------------------------------------------------------------------------
# 6. oracle vs asymptotic orders on the quartic problem

def test_criterion_6_oracle_agrees_with_asymptotic(ex1_run):
    pre, spec, hier, sets, _ = ex1_run
    roots = shooting_oracle_1d(spec, (0.1, 2.0))
    assert len(roots) == 2
    mesh = hier[-1]
    i0 = int(np.argmin(mesh.nodes))
    deltas = []
    for rec in sets[-1].records:
        anchor = float(rec.u[i0])
        oracle = min(roots, key=lambda r: abs(r.u0 - anchor))
        true_mode = convergence_table(sets, hier, rec.id, mode="oracle",
                                      oracle=oracle)
        asym_mode = convergence_table(sets, hier, rec.id)
        l2_true = true_mode.last_orders(1)[-1][0]
        l2_asym = asym_mode.last_orders(1)[-1][0]
        deltas.append(abs(l2_true - l2_asym))
        assert deltas[-1] <= 0.1
    print(f"criterion 6: PASS (L2 order gap {max(deltas):.3f} <= 0.1)")
