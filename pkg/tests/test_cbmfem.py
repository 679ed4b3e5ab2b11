"""Multilevel driver: interpolation, guess streams, filters, Newton, dedup."""

import logging

import numpy as np
import pytest

from cbmfem.assembly import get_assembler
from cbmfem.mesh import build_hierarchy
from cbmfem.multilevel import (
    FilterConfig,
    ScalarLevelProblem,
    SolutionRecord,
    SolverError,
    apply_filters,
    cbmfem_run,
    count_product_guesses,
    dedup,
    enumerate_guesses,
    interpolate,
    newton,
    solve_level0,
)
from cbmfem.nonlinearity import (
    BoundarySpec,
    Constant,
    PolyNonlinearity,
    ProblemSpec,
    dirichlet,
    interval,
    neumann,
)
from cbmfem.problems import get_preset


def _linear_problem():
    # -u'' = 1, u(0) = u(1) = 0; no nonlinearity at all
    return ProblemSpec(
        domain=interval(0.0, 1.0),
        boundary=BoundarySpec({"left": dirichlet(0.0), "right": dirichlet(0.0)}),
        f=PolyNonlinearity([(0, Constant(-1.0))]),
        name="poisson",
    )


@pytest.fixture(scope="module")
def ramp():
    preset = get_preset("ex2")
    spec = preset.spec()
    return spec, spec.build_hierarchy(3), preset.solver


# -- interpolation -----------------------------------------------------------

def test_interpolate_constant_1d(ramp):
    spec, hier, _ = ramp
    coarse, fine = hier[1], hier[2]
    out = interpolate(np.full(coarse.n_nodes, 3.25), coarse, fine)
    assert np.allclose(out, 3.25, atol=0.0)


def test_interpolate_constant_2d():
    spec = get_preset("sine2d").spec()
    hier = spec.build_hierarchy(2)
    out = interpolate(np.full(hier[1].n_nodes, -1.5), hier[1], hier[2])
    assert np.allclose(out, -1.5, atol=0.0)


def test_interpolate_midpoint(ramp):
    spec, hier, _ = ramp
    coarse, fine = hier[0], hier[1]
    values = np.zeros(coarse.n_nodes)
    right = int(np.argmax(coarse.nodes))
    values[right] = 1.0
    out = interpolate(values, coarse, fine)
    mid = int(np.argmin(np.abs(fine.nodes - (coarse.nodes[right] - fine.h / 2))))
    assert out[mid] == pytest.approx(0.5, abs=0.0)


def test_interpolate_preserves_l2(ramp):
    from cbmfem.assembly import energy_norms

    spec, hier, _ = ramp
    rng = np.random.default_rng(20240817)
    for coarse, fine in zip(hier[:-1], hier[1:]):
        v = rng.standard_normal(coarse.n_nodes)
        out = interpolate(v, coarse, fine)
        l2_c = energy_norms(coarse, v)[0]
        l2_f = energy_norms(fine, out)[0]
        assert abs(l2_c - l2_f) <= 1e-12 * max(1.0, l2_c)


def test_interpolate_preserves_l2_2d():
    from cbmfem.assembly import energy_norms

    spec = get_preset("sine2d").spec()
    hier = spec.build_hierarchy(2)
    rng = np.random.default_rng(7)
    v = rng.standard_normal(hier[1].n_nodes)
    out = interpolate(v, hier[1], hier[2])
    assert abs(energy_norms(hier[1], v)[0]
               - energy_norms(hier[2], out)[0]) <= 1e-12


def test_interpolate_rejects_level_gap(ramp):
    spec, hier, _ = ramp
    with pytest.raises(ValueError):
        interpolate(np.zeros(hier[0].n_nodes), hier[0], hier[2])


# -- guess enumeration -------------------------------------------------------

def test_interpolant_emitted_first(ramp):
    spec, hier, cfg = ramp
    prob = ScalarLevelProblem(hier[1], spec)
    interp = prob.enforce_fixed(np.linspace(0.0, 1.0, hier[1].n_nodes))
    gid, first = next(enumerate_guesses(prob, interp, cfg))
    assert gid == 0
    assert np.array_equal(first, interp)


def test_linear_problem_emits_two_guesses():
    spec = _linear_problem()
    hier = spec.build_hierarchy(1)
    cfg = FilterConfig()
    prob = ScalarLevelProblem(hier[1], spec)
    interp = prob.enforce_fixed(np.zeros(hier[1].n_nodes))
    guesses = list(enumerate_guesses(prob, interp, cfg))
    # degree-1 local polynomials: singleton root sets, so the product
    # contributes a single point besides the interpolant
    assert len(guesses) == 2


def test_linear_problem_single_solution():
    spec = _linear_problem()
    hier = spec.build_hierarchy(3)
    sets = cbmfem_run(hier, spec, FilterConfig())
    assert [len(s.records) for s in sets] == [1, 1, 1, 1]
    # -u'' = 1 with zero ends has the parabola x(1-x)/2; check the midpoint
    mesh = hier[-1]
    mid = int(np.argmin(np.abs(mesh.nodes - 0.5)))
    assert sets[-1].records[0].u[mid] == pytest.approx(0.125, abs=1e-10)


def test_quadratic_guess_count_bound_2d():
    preset = get_preset("sine2d")
    spec = preset.spec()
    hier = spec.build_hierarchy(1)
    prob0 = ScalarLevelProblem(hier[0], spec)
    prob1 = ScalarLevelProblem(hier[1], spec)
    base = solve_level0(prob0, preset.solver)
    parent = base.records[0]
    interp = prob1.enforce_fixed(interpolate(parent.u, hier[0], hier[1]))
    n_new = len(prob1.new_free)
    assert n_new == 4
    count = sum(1 for _ in enumerate_guesses(prob1, interp, preset.solver))
    # quadratic local equations: at most 2 roots per new free node
    assert count <= 2**n_new + 1
    assert count_product_guesses(prob1, interp, preset.solver) <= 2**n_new + 1


def test_guess_pool_truncation_logged(caplog):
    preset = get_preset("ex3")
    spec = preset.spec(p=7.0)
    hier = spec.build_hierarchy(3)
    cfg = FilterConfig(
        c1=preset.solver.c1, c2=preset.solver.c2,
        root_mode=preset.solver.root_mode, max_guesses_per_level=40,
    )
    with caplog.at_level(logging.WARNING, logger="cbmfem.multilevel"):
        sets = cbmfem_run(hier, spec, cfg)
    truncated = sum(s.diagnostics.guesses_truncated for s in sets[1:])
    assert truncated > 0
    assert any("truncated" in rec.message for rec in caplog.records)
    for s in sets:
        assert s.diagnostics.guesses_emitted <= cfg.max_guesses_per_level


# -- filters -----------------------------------------------------------------

def test_filters_accept_exact_solution(ramp):
    spec, hier, cfg = ramp
    sets = cbmfem_run(hier[:2], spec, cfg)
    prob = ScalarLevelProblem(hier[1], spec)
    exact = sets[1].records[0].u
    interp = prob.enforce_fixed(
        interpolate(sets[0].records[0].u, hier[0], hier[1]))
    ok, reason = apply_filters(exact, interp, hier[1], spec, cfg)
    assert ok and reason is None


def test_filters_reject_unbounded(ramp):
    spec, hier, cfg = ramp
    guess = np.full(hier[1].n_nodes, 10.0 * cfg.c3)
    interp = np.linspace(0.0, 1.0, hier[1].n_nodes)
    ok, reason = apply_filters(guess, interp, hier[1], spec, cfg)
    assert not ok
    assert reason == "boundedness"


def test_filters_reject_far_guess(ramp):
    # residual far above the interpolant's, but convergence window wide open
    spec, hier, _ = ramp
    cfg = FilterConfig(c1=1.5, c2=1e12, c3=1e6)
    mesh = hier[1]
    x = mesh.nodes.copy()
    interp = x.copy()          # boundary-compatible, modest residual
    guess = x + np.sin(np.pi * x) * 50.0
    ok, reason = apply_filters(guess, interp, mesh, spec, cfg)
    assert not ok
    assert reason == "locality"


def test_filters_reject_nonconvergent(ramp):
    spec, hier, _ = ramp
    cfg = FilterConfig(c1=1e12, c2=1e-8, c3=1e6)
    mesh = hier[1]
    x = mesh.nodes.copy()
    interp = x.copy()
    ok, reason = apply_filters(x + 0.3 * np.sin(np.pi * x), interp,
                               mesh, spec, cfg)
    assert not ok
    assert reason == "convergence"


def test_interpolant_passes_own_locality(ramp):
    # the interpolant's ratio is exactly 1, so any c1 > 1 keeps it
    spec, hier, _ = ramp
    cfg = FilterConfig(c1=1.0001, c2=1e12, c3=1e6)
    mesh = hier[1]
    interp = mesh.nodes.copy()
    ok, reason = apply_filters(interp, interp, mesh, spec, cfg)
    assert ok, reason


def test_filter_monotonicity(ramp):
    # widening (c1, c2, c3) never shrinks the accepted subset of a fixed
    # stream of guesses
    spec, hier, _ = ramp
    mesh = hier[1]
    x = mesh.nodes.copy()
    rng = np.random.default_rng(99)
    stream = [x + a * np.sin(np.pi * x) + b * rng.standard_normal(len(x))
              for a, b in [(0.0, 0.0), (0.5, 0.0), (5.0, 0.0), (50.0, 0.0),
                           (0.2, 0.1), (1.0, 1.0), (20.0, 5.0), (0.0, 90.0)]]
    interp = x.copy()
    base = FilterConfig(c1=2.0, c2=50.0, c3=60.0)
    wide = FilterConfig(c1=20.0, c2=5000.0, c3=600.0)
    kept_base = {k for k, g in enumerate(stream)
                 if apply_filters(g, interp, mesh, spec, base)[0]}
    kept_wide = {k for k, g in enumerate(stream)
                 if apply_filters(g, interp, mesh, spec, wide)[0]}
    assert kept_base <= kept_wide


# -- newton ------------------------------------------------------------------

def test_newton_at_exact_solution(ramp):
    spec, hier, cfg = ramp
    sets = cbmfem_run(hier[:3], spec, cfg)
    prob = ScalarLevelProblem(hier[2], spec)
    u0 = sets[2].records[0].u
    u, rn, iters, reason = newton(prob, u0, cfg)
    assert reason is None
    assert iters <= 1
    assert rn < cfg.newton_tol


def test_newton_divergence_is_graceful():
    preset = get_preset("ex1")
    spec = preset.spec()
    hier = spec.build_hierarchy(2)
    prob = ScalarLevelProblem(hier[2], spec)
    huge = prob.enforce_fixed(np.full(hier[2].n_nodes, 1e6))
    u, rn, iters, reason = newton(prob, huge, preset.solver)
    assert u is None
    assert reason in ("nan", "singular", "stalled", "max_iter")


# -- dedup -------------------------------------------------------------------

def _rec(u, rid=0):
    return SolutionRecord(id=rid, u=np.asarray(u, dtype=float),
                          residual_l2=0.0, newton_iters=0)


def test_dedup_drops_identical(ramp):
    spec, hier, cfg = ramp
    prob = ScalarLevelProblem(hier[0], spec)
    n = hier[0].n_nodes
    recs = [_rec(np.ones(n), 0), _rec(np.ones(n), 1)]
    assert len(dedup(recs, prob, cfg.dedup_tol)) == 1


def test_dedup_keeps_distant(ramp):
    spec, hier, cfg = ramp
    prob = ScalarLevelProblem(hier[0], spec)
    n = hier[0].n_nodes
    recs = [_rec(np.zeros(n)), _rec(np.ones(n), 1)]  # L2 distance 1
    assert len(dedup(recs, prob, 1e-6)) == 2


def test_dedup_collapses_cluster(ramp):
    spec, hier, cfg = ramp
    prob = ScalarLevelProblem(hier[0], spec)
    n = hier[0].n_nodes
    recs = [_rec(np.ones(n) + eps, k)
            for k, eps in enumerate((0.0, 1e-9, -1e-9))]
    kept = dedup(recs, prob, 1e-6)
    assert len(kept) == 1
    assert kept[0].id == 0  # first arrival wins


# -- level 0 -----------------------------------------------------------------

def test_level0_finds_trivial_branch():
    preset = get_preset("ex3")
    spec = preset.spec(p=1.0)
    hier = spec.build_hierarchy(0)
    prob = ScalarLevelProblem(hier[0], spec)
    out = solve_level0(prob, preset.solver)
    assert any(np.max(np.abs(r.u)) < 1e-12 for r in out.records)


def test_level0_linear_unique():
    spec = _linear_problem()
    hier = spec.build_hierarchy(0)
    out = solve_level0(ScalarLevelProblem(hier[0], spec), FilterConfig())
    assert len(out.records) == 1


def test_level0_empty_raises():
    preset = get_preset("ex2")
    spec = preset.spec()
    hier = spec.build_hierarchy(0)
    prob = ScalarLevelProblem(hier[0], spec)
    # every root of the single-node polynomial exceeds a microscopic c3
    with pytest.raises(SolverError):
        solve_level0(prob, FilterConfig(c3=1e-9))


# -- full runs ---------------------------------------------------------------

def test_run_lineage_and_residuals():
    preset = get_preset("ex2")
    spec = preset.spec()
    hier = spec.build_hierarchy(4)
    sets = cbmfem_run(hier, spec, preset.solver)
    for prev, cur, mesh in zip(sets[:-1], sets[1:], hier[1:]):
        prev_ids = {r.id for r in prev.records}
        asm = get_assembler(mesh, spec)
        for rec in cur.records:
            assert rec.parent_id in prev_ids
            # re-assembled residual, independent of the solver path
            assert asm.norm(asm.residual(rec.u)) <= preset.solver.newton_tol


def test_run_dedup_invariant():
    preset = get_preset("ex3")
    spec = preset.spec(p=7.0)
    hier = spec.build_hierarchy(3)
    sets = cbmfem_run(hier, spec, preset.solver)
    from cbmfem.assembly import energy_norms

    for s, mesh in zip(sets, hier):
        for a in range(len(s.records)):
            ua = s.records[a].u
            for b in range(a + 1, len(s.records)):
                ub = s.records[b].u
                dist = energy_norms(mesh, ua, ub)[0]
                scale = max(1.0, energy_norms(mesh, ua)[0],
                            energy_norms(mesh, ub)[0])
                assert dist > preset.solver.dedup_tol * scale


def test_run_deterministic():
    preset = get_preset("ex3")
    spec = preset.spec(p=7.0)
    hier = spec.build_hierarchy(3)
    a = cbmfem_run(hier, spec, preset.solver)
    b = cbmfem_run(hier, spec, preset.solver)
    assert [len(s.records) for s in a] == [len(s.records) for s in b]
    for sa, sb in zip(a, b):
        for ra, rb in zip(sa.records, sb.records):
            assert np.array_equal(ra.u, rb.u)
            assert (ra.parent_id, ra.guess_id) == (rb.parent_id, rb.guess_id)


def test_refinement_only_tail_keeps_set():
    # with enumeration disabled after level 0 the two branches must still
    # track upward through interpolation + Newton alone
    preset = get_preset("ex1")
    spec = preset.spec()
    hier = spec.build_hierarchy(4)
    cfg = FilterConfig(comb_level_cap=0)
    sets = cbmfem_run(hier, spec, cfg)
    assert [len(s.records) for s in sets] == [2, 2, 2, 2, 2]


def test_threaded_run_matches_serial():
    preset = get_preset("ex3")
    spec = preset.spec(p=7.0)
    hier = spec.build_hierarchy(3)
    serial = cbmfem_run(hier, spec, preset.solver)
    threaded_cfg = FilterConfig(
        c1=preset.solver.c1, c2=preset.solver.c2,
        root_mode=preset.solver.root_mode, threads=4,
    )
    threaded = cbmfem_run(hier, spec, threaded_cfg)
    assert [len(s.records) for s in serial] == [len(s.records) for s in threaded]
    for sa, sb in zip(serial, threaded):
        for ra, rb in zip(sa.records, sb.records):
            assert np.array_equal(ra.u, rb.u)
