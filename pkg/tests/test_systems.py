"""Two-field reduction: affine elimination, constant states, full-system residuals."""

import numpy as np
import pytest

from cbmfem.multilevel import FilterConfig, SolverError
from cbmfem.problems import get_preset
from cbmfem.systems import (
    ReducedLevelProblem,
    TwoFieldSpec,
    reduce_system,
    solve_system,
    two_field_residual,
)


@pytest.fixture(scope="module")
def schnak():
    preset = get_preset("schnakenberg")
    return preset.spec(), preset.solver


def _scaled(mesh, r):
    return float(np.sqrt(mesh.h**mesh.dim) * np.linalg.norm(r))


# -- constant states ----------------------------------------------------------

def test_schnakenberg_constant_state(schnak):
    spec, _ = schnak
    states = spec.constant_states()
    assert len(states) == 1
    u_star, v_star = states[0]
    assert u_star == pytest.approx(1.0, abs=1e-12)
    assert v_star == pytest.approx(2.0 / 3.0, abs=1e-12)


def test_constant_state_is_discrete_solution(schnak):
    spec, _ = schnak
    mesh = spec.build_hierarchy(2)[-1]
    for u_star, v_star in spec.constant_states():
        r = two_field_residual(spec, mesh,
                               np.full(mesh.n_nodes, u_star),
                               np.full(mesh.n_nodes, v_star))
        assert _scaled(mesh, r) <= 1e-12


def test_gray_scott_constant_states():
    spec = get_preset("gray_scott").spec()
    states = spec.constant_states()
    assert states, "expected at least the (0, 1) trivial state"
    assert any(abs(u) < 1e-12 and abs(v - 1.0) < 1e-12 for u, v in states)
    mesh = spec.build_hierarchy(1)[-1]
    for u_star, v_star in states:
        r = two_field_residual(spec, mesh,
                               np.full(mesh.n_nodes, u_star),
                               np.full(mesh.n_nodes, v_star))
        assert _scaled(mesh, r) <= 1e-10


# -- the reduction ------------------------------------------------------------

def test_affine_map_solves_linear_equation(schnak):
    # u = W v + c must satisfy the discrete first equation for arbitrary v
    spec, _ = schnak
    mesh = spec.build_hierarchy(3)[-1]
    prob = reduce_system(spec, mesh)
    rng = np.random.default_rng(20240812)
    for _ in range(5):
        v = rng.standard_normal(mesh.n_nodes)
        u = prob.u_of(v)
        r = two_field_residual(spec, mesh, u, v)
        r1 = r[: mesh.n_nodes]
        assert np.max(np.abs(r1)) <= 1e-9


def test_reduced_residual_matches_full_system(schnak):
    # the reduced residual equals the second equation's residual at (u(v), v)
    spec, _ = schnak
    mesh = spec.build_hierarchy(2)[-1]
    prob = reduce_system(spec, mesh)
    rng = np.random.default_rng(7)
    v = 0.5 + 0.1 * rng.standard_normal(mesh.n_nodes)
    r2 = two_field_residual(spec, mesh, prob.u_of(v), v)[mesh.n_nodes:]
    assert np.max(np.abs(prob.residual_free(v) - r2)) <= 1e-11


def test_reduced_local_poly_matches_residual(schnak):
    spec, _ = schnak
    mesh = spec.build_hierarchy(2)[-1]
    prob = reduce_system(spec, mesh)
    rng = np.random.default_rng(31)
    frozen = 0.7 + 0.2 * rng.standard_normal(mesh.n_nodes)
    for i in (0, mesh.n_nodes // 2, mesh.n_nodes - 1):
        poly = prob.local_poly(frozen, i)
        for y in (-0.4, 0.1, 1.3):
            probe = frozen.copy()
            probe[i] = y
            want = prob.residual_free(probe)[i]
            got = float(np.polynomial.polynomial.polyval(y, poly.coeffs))
            assert got == pytest.approx(want, abs=1e-9 * max(1.0, abs(want)))


def test_reduced_jacobian_matches_fd(schnak):
    spec, _ = schnak
    mesh = spec.build_hierarchy(2)[-1]
    prob = reduce_system(spec, mesh)
    rng = np.random.default_rng(11)
    v = 0.6 + 0.1 * rng.standard_normal(mesh.n_nodes)
    J = prob.jacobian_free(v)
    eps = 1e-6
    for j in range(0, mesh.n_nodes, 3):
        vp = v.copy(); vp[j] += eps
        vm = v.copy(); vm[j] -= eps
        col = (prob.residual_free(vp) - prob.residual_free(vm)) / (2 * eps)
        denom = max(1.0, np.max(np.abs(col)))
        assert np.max(np.abs(J[:, j] - col)) / denom <= 1e-5


def test_reduction_rejects_dirichlet_mesh():
    from cbmfem.mesh import build_hierarchy
    from cbmfem.nonlinearity import interval

    spec = get_preset("schnakenberg").spec()
    mesh = build_hierarchy(interval(0.0, 1.0),
                           {"left": "dirichlet", "right": "neumann"}, 1)[-1]
    with pytest.raises(SolverError):
        ReducedLevelProblem(mesh, spec)


def test_spec_validation():
    with pytest.raises(ValueError):
        TwoFieldSpec.schnakenberg(eta=-1.0, a=0.3, b=0.7, d=50.0)
    with pytest.raises(ValueError):
        # l_u = 0 leaves the linear block singular under pure Neumann
        TwoFieldSpec(domain=get_preset("schnakenberg").spec().domain,
                     p_u=1.0, p_v=1.0, l_u=0.0, l_v=0.0, l_c=1.0,
                     q_v=1.0, s=1.0, r_u=0.0, r_v=0.0, r_c=0.0)


# -- full runs ----------------------------------------------------------------

def test_schnakenberg_solution_set(schnak):
    spec, cfg = schnak
    hierarchy = spec.build_hierarchy(3)
    sets = solve_system(spec, hierarchy, cfg)
    finest = sets[-1]
    assert len(finest.records) == 3

    mesh = hierarchy[-1]
    for rec in finest.records:
        assert rec.v is not None
        # recovered pair solves the full two-equation system
        r = two_field_residual(spec, mesh, rec.u, rec.v)
        assert _scaled(mesh, r) <= 10.0 * cfg.newton_tol

    # constant state is among the records
    states = spec.constant_states()
    u_star, v_star = states[0]
    hit = min(np.max(np.abs(rec.u - u_star)) + np.max(np.abs(rec.v - v_star))
              for rec in finest.records)
    assert hit <= 1e-8


def test_schnakenberg_pattern_pair_mirrors(schnak):
    # the two non-constant records are x -> 1-x reflections of each other
    spec, cfg = schnak
    hierarchy = spec.build_hierarchy(3)
    sets = solve_system(spec, hierarchy, cfg)
    finest = sets[-1]
    u_star, _ = spec.constant_states()[0]
    patterns = [r for r in finest.records
                if np.max(np.abs(r.u - u_star)) > 1e-6]
    assert len(patterns) == 2
    a, b = patterns
    assert np.max(np.abs(a.u - b.u[::-1])) <= 1e-7
    assert np.max(np.abs(a.v - b.v[::-1])) <= 1e-7


def test_system_run_deterministic(schnak):
    spec, cfg = schnak
    hierarchy = spec.build_hierarchy(2)
    a = solve_system(spec, hierarchy, cfg)
    b = solve_system(spec, hierarchy, cfg)
    for sa, sb in zip(a, b):
        assert len(sa.records) == len(sb.records)
        for ra, rb in zip(sa.records, sb.records):
            assert np.array_equal(ra.u, rb.u)
            assert np.array_equal(ra.v, rb.v)
