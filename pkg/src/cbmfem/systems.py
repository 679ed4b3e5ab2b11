"""Two-field reaction-diffusion steady states via reduction to one field.

Supported shape (after adding the two equations so the first becomes linear):

    e1:  p_u u'' + p_v v'' + l_u u + l_v v + l_c = 0      (linear in u, v)
    e2:  q_v v'' + s u^2 v + r_u u + r_v v + r_c = 0      (single coupling u^2 v)

with no-flux (homogeneous Neumann) boundaries.  The discrete e1 is solved for
u in terms of v: the matrix acting on u is p_u*A - l_u*M, which the l_u < 0
mass term keeps nonsingular even though the pure-Neumann stiffness A alone is
singular.  That gives an exact affine map u_h = W v_h + c (one factorisation
per level), and substituting it into the discrete e2 leaves a residual that
is a cubic polynomial in each nodal value of v_h - exactly the structure the
companion-based multilevel driver consumes.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import scipy.sparse.linalg as spla

from . import companion
from .assembly import energy_norms, get_tables
from .mesh import MeshLevel, NodeTag, build_hierarchy
from .multilevel import FilterConfig, SolverError, run_multilevel
from .nonlinearity import Domain, interval, unit_square

_QUAD_DEGREE = 4  # u^2 v phi with all fields P1


@dataclass(frozen=True)
class TwoFieldSpec:
    """Coefficients of the transformed two-field system above."""

    domain: Domain
    p_u: float
    p_v: float
    l_u: float
    l_v: float
    l_c: float
    q_v: float
    s: float
    r_u: float
    r_v: float
    r_c: float
    name: str = ""

    def __post_init__(self):
        if self.p_u <= 0 or self.q_v <= 0:
            raise ValueError("diffusion coefficients must be positive")
        if self.l_u >= 0:
            raise ValueError(
                "the reduction needs l_u < 0: the linear block p_u*A - l_u*M "
                "is singular without a positive mass contribution"
            )

    @classmethod
    def schnakenberg(cls, eta: float, a: float, b: float, d: float,
                     domain: Domain | None = None) -> "TwoFieldSpec":
        """Steady Schnakenberg activator-substrate model.

            u'' + eta*(a - u + u^2 v) = 0
            d v'' + eta*(b - u^2 v) = 0

        Adding the equations makes the first one linear, which is the form
        stored here.
        """
        return cls(
            domain=domain or interval(0.0, 1.0),
            p_u=1.0, p_v=d, l_u=-eta, l_v=0.0, l_c=eta * (a + b),
            q_v=d, s=-eta, r_u=0.0, r_v=0.0, r_c=eta * b,
            name="schnakenberg",
        )

    @classmethod
    def gray_scott(cls, d_a: float, d_s: float, mu: float, rho: float,
                   domain: Domain | None = None) -> "TwoFieldSpec":
        """Steady Gray-Scott model (u = activator, v = substrate).

            d_a lap(u) = -v u^2 + (mu + rho) u
            d_s lap(v) =  v u^2 - rho (1 - v)

        Stored transformed: e1 is the sum of both equations (linear), e2 is
        the substrate equation.
        """
        return cls(
            domain=domain or unit_square(),
            p_u=d_a, p_v=d_s, l_u=-(mu + rho), l_v=-rho, l_c=rho,
            q_v=d_s, s=-1.0, r_u=0.0, r_v=-rho, r_c=rho,
            name="gray_scott",
        )

    def build_hierarchy(self, max_level: int) -> list:
        names = ("left", "right") if self.domain.dim == 1 else (
            "left", "right", "bottom", "top")
        tags = {n: "neumann" for n in names}
        return build_hierarchy(self.domain, tags, max_level)

    def constant_states(self) -> list:
        """All spatially constant solutions (u*, v*) of the system."""
        alpha = -self.l_c / self.l_u
        beta = -self.l_v / self.l_u  # u = alpha + beta*v on constants
        P = np.polynomial.polynomial
        u_poly = np.array([alpha, beta])
        poly = self.s * P.polymul(P.polymul(u_poly, u_poly), [0.0, 1.0])
        poly = P.polyadd(poly, self.r_u * u_poly)
        poly = P.polyadd(poly, [self.r_c, self.r_v])
        try:
            roots = companion.poly_roots(companion.UniPoly(poly))
        except companion.DegeneratePolynomialError:
            return []
        vs = companion.real_roots(roots)
        return [(alpha + beta * v, float(v)) for v in vs]


class ReducedLevelProblem:
    """One level of the reduced (v only) problem; plugs into the driver."""

    def __init__(self, mesh: MeshLevel, spec: TwoFieldSpec):
        if np.any(mesh.boundary_tags == NodeTag.DIRICHLET):
            raise SolverError(
                "two-field systems support no-flux boundaries only; the mesh "
                "carries Dirichlet tags"
            )
        self.mesh = mesh
        self.spec = spec
        self.h = mesh.h
        self.tables = get_tables(mesh, _QUAD_DEGREE)
        self.A = self.tables.stiffness()
        self.M = self.tables.mass()
        self.mvec = self.M @ np.ones(mesh.n_nodes)
        k_u = (spec.p_u * self.A - spec.l_u * self.M).tocsc()
        k_v = (spec.p_v * self.A - spec.l_v * self.M).tocsc()
        try:
            lu = spla.splu(k_u)
        except RuntimeError as exc:
            raise SolverError(
                f"linear block of the first equation is singular: {exc}"
            ) from exc
        # exact affine map u = W v + c; W is dense, built once per level
        self.W = -lu.solve(k_v.toarray())
        self.c = spec.l_c * lu.solve(self.mvec)
        self.free = np.arange(mesh.n_nodes)
        self.new_free = mesh.new_free_nodes
        n = mesh.n_nodes
        self.chunk_size = max(32, min(4096, 2_000_000 // max(1, n * n)))
        self._u_cache = (None, None)

    # -- affine recovery of the eliminated field ----------------------------

    def u_of(self, v: np.ndarray) -> np.ndarray:
        return self.c + self.W @ v

    # -- driver surface ------------------------------------------------------

    def base_values(self) -> np.ndarray:
        return np.zeros(self.mesh.n_nodes)

    def enforce_fixed(self, v: np.ndarray) -> np.ndarray:
        return v  # no Dirichlet nodes

    def residual_free(self, v: np.ndarray) -> np.ndarray:
        u = self.u_of(v)
        s = self.spec
        u_q = self.tables.values_at_quad(u)
        v_q = self.tables.values_at_quad(v)
        coupling = self.tables.load(u_q * u_q * v_q)
        return (s.q_v * (self.A @ v) - s.s * coupling
                - s.r_u * (self.M @ u) - s.r_v * (self.M @ v)
                - s.r_c * self.mvec)

    def residual_batch(self, V: np.ndarray) -> np.ndarray:
        s = self.spec
        U = self.c[None, :] + V @ self.W.T
        u_q = self.tables.values_at_quad(U)
        v_q = self.tables.values_at_quad(V)
        coupling = self.tables.load_batch(u_q * u_q * v_q)
        return (s.q_v * (self.A @ V.T).T - s.s * coupling
                - s.r_u * (self.M @ U.T).T - s.r_v * (self.M @ V.T).T
                - s.r_c * self.mvec[None, :])

    def residual_norm(self, rvec: np.ndarray) -> float:
        return float(np.sqrt(self.h**self.mesh.dim) * np.linalg.norm(rvec))

    def jacobian_free(self, v: np.ndarray) -> np.ndarray:
        s = self.spec
        u = self.u_of(v)
        u_q = self.tables.values_at_quad(u)
        v_q = self.tables.values_at_quad(v)
        b_mat = self.tables.mass(2.0 * u_q * v_q)  # dS/du direction
        m_u2 = self.tables.mass(u_q * u_q)
        J = (s.q_v * self.A - s.s * m_u2 - s.r_v * self.M).toarray()
        J -= s.s * (b_mat @ self.W)
        J -= s.r_u * (self.M @ self.W)
        return J

    def solve_linear(self, J: np.ndarray, rhs: np.ndarray) -> np.ndarray:
        return np.linalg.solve(J, rhs)

    def local_poly(self, frozen: np.ndarray, i: int) -> companion.UniPoly:
        """Reduced residual component i as a cubic in v_i (others frozen)."""
        cached, u0 = self._u_cache
        if cached is not frozen:
            u0 = self.u_of(frozen)
            self._u_cache = (frozen, u0)
        s = self.spec
        w_col = self.W[:, i]
        v_i0 = frozen[i]
        radius = max(1.0, 2.0 * abs(v_i0))
        ys = companion.chebyshev_points(radius, 4)
        dy = ys - v_i0

        a_row = self.A.getrow(i)
        m_row = self.M.getrow(i)
        av = a_row @ frozen
        mv = m_row @ frozen
        mu = m_row @ u0
        a_ii = a_row[0, i]
        m_ii = m_row[0, i]
        m_w = m_row @ w_col
        vals = (s.q_v * (av + a_ii * dy)
                - s.r_u * (mu + m_w * dy)
                - s.r_v * (mv + m_ii * dy)
                - s.r_c * self.mvec[i])

        basis = self.tables.basis
        coupling = np.zeros(4)
        for e, loc in self.mesh.node_to_elements()[i]:
            conn = self.mesh.elements[e]
            u_e = u0[conn][None, :] + np.outer(dy, w_col[conn])  # (4, n_loc)
            v_e = np.repeat(frozen[conn][None, :], 4, axis=0)
            v_e[:, loc] = ys
            u_q = u_e @ basis
            v_q = v_e @ basis
            coupling += self.tables.jac[e] * ((u_q * u_q * v_q)
                                              @ self.tables.wbasis[loc])
        vals = vals - s.s * coupling
        vand = np.polynomial.polynomial.polyvander(ys, 3)
        return companion.UniPoly(np.linalg.solve(vand, vals))

    def l2_norm(self, v: np.ndarray) -> float:
        return energy_norms(self.mesh, v)[0]

    def l2_diff(self, v1: np.ndarray, v2: np.ndarray) -> float:
        return energy_norms(self.mesh, v1, v2)[0]


def reduce_system(spec: TwoFieldSpec, mesh: MeshLevel) -> ReducedLevelProblem:
    """Discretise one level and eliminate u through the linear equation."""
    return ReducedLevelProblem(mesh, spec)


def two_field_residual(spec: TwoFieldSpec, mesh: MeshLevel, u: np.ndarray,
                       v: np.ndarray) -> np.ndarray:
    """Discrete residual of both equations, assembled without the reduction.

    Returns the stacked vector [r1; r2]; used to validate that recovered
    (u, v) pairs solve the full system and not just the reduced one.
    """
    tables = get_tables(mesh, _QUAD_DEGREE)
    A = tables.stiffness()
    M = tables.mass()
    mvec = M @ np.ones(mesh.n_nodes)
    u_q = tables.values_at_quad(u)
    v_q = tables.values_at_quad(v)
    coupling = tables.load(u_q * u_q * v_q)
    r1 = (spec.p_u * (A @ u) + spec.p_v * (A @ v)
          - spec.l_u * (M @ u) - spec.l_v * (M @ v) - spec.l_c * mvec)
    r2 = (spec.q_v * (A @ v) - spec.s * coupling
          - spec.r_u * (M @ u) - spec.r_v * (M @ v) - spec.r_c * mvec)
    return np.concatenate([r1, r2])


def solve_system(spec: TwoFieldSpec, hierarchy: list,
                 cfg: FilterConfig | None = None) -> list:
    """Run the multilevel pipeline on a two-field system.

    Returns one SolutionSet per level whose records carry the recovered pair:
    `u` holds the eliminated field, `v` the field the reduction solved for.
    """
    cfg = cfg or FilterConfig()
    problems = [ReducedLevelProblem(mesh, spec) for mesh in hierarchy]
    vsets = run_multilevel(problems, cfg)
    out = []
    for prob, vset in zip(problems, vsets):
        records = [replace(rec, u=prob.u_of(rec.u), v=rec.u.copy())
                   for rec in vset.records]
        out.append(replace(vset, records=records))
    return out
