"""P1 finite element assembly on interval and triangle meshes.

The residual of -lap(u) + f(x, u) = 0 at a free node i is

    F_i(u) = int grad(u).grad(phi_i) + int_G1 ratio*u*phi_i
             + int f(x, u)*phi_i - int_G1 g*phi_i

where G1 collects the Neumann/Robin parts of the boundary.  Everything that
does not depend on u (geometry, quadrature tables, coefficient values at the
quadrature points, the stiffness-plus-boundary matrix) is precomputed once
per (mesh, problem) pair and cached on the mesh, because the multilevel
driver evaluates residuals for very many candidate vectors per level.
"""

from __future__ import annotations

import math

import numpy as np
import scipy.sparse as sp

from .mesh import MeshLevel
from .nonlinearity import ProblemSpec

# fallback x-degree used to pick quadrature orders for non-polynomial
# coefficients (gives a degree >= 6 rule for the sine load)
_NONPOLY_XDEG = 5


# ---------------------------------------------------------------------------
# quadrature rules

def interval_rule(n: int):
    """n-point Gauss-Legendre rule on [0, 1]; weights sum to 1."""
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


# Dunavant 12-point rule, exact to total degree 6, fully symmetric.
_DUNAVANT6 = [
    (0.050844906370207, (0.873821971016996, 0.063089014491502, 0.063089014491502)),
    (0.116786275726379, (0.501426509658179, 0.249286745170910, 0.249286745170910)),
    (0.082851075618374, (0.053145049844816, 0.310352451033785, 0.636502499121399)),
]


def _symmetric_orbit(point):
    a, b, c = point
    perms = {(a, b, c), (a, c, b), (b, a, c), (b, c, a), (c, a, b), (c, b, a)}
    return sorted(perms)


def triangle_rule(degree: int):
    """Quadrature on the reference triangle as (barycentric, weights).

    Weights sum to 1; a physical integral is area * sum(w * f(x_q)).  Up to
    degree 6 this is the symmetric 12-point rule (full symmetry keeps the
    discrete problem exactly invariant under mesh symmetries); beyond that a
    collapsed tensor Gauss rule of the requested degree is used.
    """
    if degree <= 6:
        bary, weights = [], []
        for w, point in _DUNAVANT6:
            orbit = _symmetric_orbit(point)
            bary.extend(orbit)
            weights.extend([w] * len(orbit))
        return np.array(bary), np.array(weights)
    # Duffy map (s, t) in [0,1]^2 -> (x, y) = (s(1-t), s t), jacobian s
    ns = math.ceil((degree + 2) / 2)
    nt = math.ceil((degree + 1) / 2)
    s, ws = interval_rule(ns)
    t, wt = interval_rule(nt)
    S, T = np.meshgrid(s, t, indexing="ij")
    x = (S * (1.0 - T)).ravel()
    y = (S * T).ravel()
    w = (np.outer(ws * s, wt)).ravel()  # extra s from the jacobian
    bary = np.column_stack([1.0 - x - y, x, y])
    return bary, 2.0 * w  # reference area is 1/2; normalise to sum 1


def quad_degree(spec: ProblemSpec) -> int:
    """Polynomial degree the element rule must integrate exactly."""
    m = spec.f.degree
    deg = max(m + 2, 2)
    for k, coef in spec.f.terms:
        xd = coef.x_degree
        if xd is None:
            xd = _NONPOLY_XDEG
            r = getattr(coef, "r", None)
            if r is not None:
                xd = max(xd, math.ceil(r))
        deg = max(deg, k + xd + 1)
    return deg


# ---------------------------------------------------------------------------
# geometry + quadrature tables shared by the scalar and two-field assemblers

class P1Tables:
    """Per-element P1 data for one mesh level and one quadrature degree.

    Attributes: `points` (m, nq[, 2]) quadrature points, `jac` (m,) element
    measures, `basis` (n_loc, nq) shape values, `qweights` (nq,), and
    `k_loc` (m, n_loc, n_loc) exact local stiffness blocks.
    """

    def __init__(self, mesh: MeshLevel, degree: int):
        self.mesh = mesh
        conn = mesh.elements
        if mesh.dim == 1:
            t, w = interval_rule(math.ceil((degree + 1) / 2))
            self.basis = np.vstack([1.0 - t, t])
            x0 = mesh.nodes[conn[:, 0]]
            length = mesh.nodes[conn[:, 1]] - x0
            self.points = x0[:, None] + np.outer(length, t)
            self.jac = length
            grads = np.stack([-1.0 / length, 1.0 / length], axis=1)
            self.k_loc = grads[:, :, None] * grads[:, None, :] * length[:, None, None]
        else:
            bary, w = triangle_rule(degree)
            self.basis = bary.T
            coords = mesh.nodes[conn]
            d1 = coords[:, 1] - coords[:, 0]
            d2 = coords[:, 2] - coords[:, 0]
            det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
            area = 0.5 * np.abs(det)
            g1 = np.stack([d2[:, 1], -d2[:, 0]], axis=1) / det[:, None]
            g2 = np.stack([-d1[:, 1], d1[:, 0]], axis=1) / det[:, None]
            g0 = -g1 - g2
            grads = np.stack([g0, g1, g2], axis=1)
            self.points = np.einsum("qv,mvd->mqd", bary, coords)
            self.jac = area
            self.k_loc = np.einsum("mad,mbd,m->mab", grads, grads, area)
        self.qweights = w
        self.wbasis = w[None, :] * self.basis  # (n_loc, nq)
        nloc = conn.shape[1]
        m = conn.shape[0]
        self._rows = np.repeat(conn, nloc, axis=1).ravel()
        self._cols = np.tile(conn, (1, nloc)).ravel()
        self.scatter = sp.csr_matrix(
            (np.ones(m * nloc), (np.arange(m * nloc), conn.ravel())),
            shape=(m * nloc, mesh.n_nodes),
        )

    @property
    def n_quad(self) -> int:
        return self.basis.shape[1]

    def values_at_quad(self, u: np.ndarray) -> np.ndarray:
        """Nodal vector(s) (..., n) -> values at quadrature points (..., m, nq)."""
        return u[..., self.mesh.elements] @ self.basis

    def assemble(self, blocks: np.ndarray) -> sp.csr_matrix:
        """(m, n_loc, n_loc) local blocks -> global sparse matrix."""
        n = self.mesh.n_nodes
        return sp.csr_matrix((blocks.ravel(), (self._rows, self._cols)),
                             shape=(n, n))

    def stiffness(self) -> sp.csr_matrix:
        return self.assemble(self.k_loc)

    def mass_blocks(self, w_q=None) -> np.ndarray:
        """Local blocks of int w(x) phi_a phi_b (w_q of shape (m, nq) or None)."""
        if w_q is None:
            return np.einsum("aq,bq,m->mab", self.wbasis, self.basis, self.jac)
        return np.einsum("mq,aq,bq,m->mab", w_q, self.wbasis, self.basis, self.jac)

    def mass(self, w_q=None) -> sp.csr_matrix:
        return self.assemble(self.mass_blocks(w_q))

    def load(self, f_q: np.ndarray) -> np.ndarray:
        """Global vector of int f phi_i from values f_q at quadrature points."""
        loads = self.jac[:, None] * (f_q @ self.wbasis.T)
        return self.scatter.T @ loads.ravel()

    def load_batch(self, f_q: np.ndarray) -> np.ndarray:
        """Batched version: (nb, m, nq) -> (nb, n_nodes)."""
        loads = self.jac[None, :, None] * np.einsum("bmq,lq->bml", f_q, self.wbasis)
        return (self.scatter.T @ loads.reshape(f_q.shape[0], -1).T).T


def get_tables(mesh: MeshLevel, degree: int) -> P1Tables:
    key = ("p1tables", degree)
    if key not in mesh._cache:
        mesh._cache[key] = P1Tables(mesh, degree)
    return mesh._cache[key]


# ---------------------------------------------------------------------------
# scalar-problem assembler

class Assembler:
    """Cached P1 assembly for one (mesh, problem) pair."""

    def __init__(self, mesh: MeshLevel, spec: ProblemSpec):
        if mesh.dim != spec.domain.dim:
            raise ValueError("mesh and problem dimensions disagree")
        self.mesh = mesh
        self.spec = spec
        self.free = mesh.free_nodes
        self.tables = get_tables(mesh, quad_degree(spec))
        # coefficient values g_k at the quadrature points, keyed by power;
        # materialised at full shape so per-element rows can be sliced out
        shape = (mesh.n_elements, self.tables.n_quad)
        self.coef_tables = [
            (k, np.ascontiguousarray(np.broadcast_to(
                np.asarray(coef(self.tables.points), dtype=float), shape)))
            for k, coef in spec.f.terms
        ]
        self._setup_boundary()
        self.a_full = (self.tables.stiffness() + self.bmat).tocsr()

    def _edge_segment(self, i, j):
        mx, my = 0.5 * (self.mesh.nodes[i] + self.mesh.nodes[j])
        if mx == 0.0:
            return "left"
        if mx == 1.0:
            return "right"
        if my == 0.0:
            return "bottom"
        if my == 1.0:
            return "top"
        raise ValueError(f"boundary edge ({i}, {j}) lies on no square side")

    def _setup_boundary(self):
        """Collect Robin/Neumann contributions: a matrix part and a load."""
        mesh, spec = self.mesh, self.spec
        n = mesh.n_nodes
        self.bload = np.zeros(n)
        rows, cols, vals = [], [], []
        if mesh.dim == 1:
            for name, idx in (("left", 0), ("right", n - 1)):
                bc = spec.boundary[name]
                if bc.kind == "dirichlet":
                    continue
                # boundary 'integrals' in 1d are point evaluations
                rows.append(idx), cols.append(idx), vals.append(bc.ratio)
                self.bload[idx] += bc.g
        else:
            for i, j in mesh.boundary_edges():
                bc = spec.boundary[self._edge_segment(i, j)]
                if bc.kind == "dirichlet":
                    continue
                ell = np.linalg.norm(mesh.nodes[j] - mesh.nodes[i])
                if bc.ratio != 0.0:
                    block = bc.ratio * ell / 6.0
                    for (r, c, v) in ((i, i, 2), (j, j, 2), (i, j, 1), (j, i, 1)):
                        rows.append(r), cols.append(c), vals.append(v * block)
                self.bload[[i, j]] += bc.g * ell / 2.0
        self.bmat = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))

    # -- evaluation ---------------------------------------------------------

    def _f_at_quad(self, u_q):
        out = np.zeros_like(u_q)
        for k, table in self.coef_tables:
            out += table * u_q**k
        return out

    def _df_at_quad(self, u_q):
        out = np.zeros_like(u_q)
        for k, table in self.coef_tables:
            if k >= 1:
                out += k * table * u_q ** (k - 1)
        return out

    def residual(self, u: np.ndarray) -> np.ndarray:
        """Residual over free nodes for a full nodal vector."""
        u_q = self.tables.values_at_quad(u)
        full = self.a_full @ u + self.tables.load(self._f_at_quad(u_q)) - self.bload
        return full[self.free]

    def residual_batch(self, U: np.ndarray) -> np.ndarray:
        """Residuals for a batch of nodal vectors, shape (nb, n_free)."""
        lin = (self.a_full @ U.T).T
        u_q = self.tables.values_at_quad(U)
        nl = self.tables.load_batch(self._f_at_quad(u_q))
        return (lin + nl - self.bload[None, :])[:, self.free]

    def jacobian(self, u: np.ndarray) -> sp.csr_matrix:
        """Jacobian over free nodes: stiffness + f'(x,u)-weighted mass."""
        u_q = self.tables.values_at_quad(u)
        full = self.a_full + self.tables.mass(self._df_at_quad(u_q))
        return full[self.free][:, self.free].tocsr()

    def component_probe(self, u: np.ndarray, i: int, ys: np.ndarray) -> np.ndarray:
        """Residual component i as node i's value sweeps over `ys`.

        All other entries of u stay frozen.  Only elements touching node i
        are visited, so a probe costs O(1) per value.
        """
        ys = np.asarray(ys, dtype=float)
        out = np.zeros(ys.shape)
        basis = self.tables.basis
        for e, loc in self.mesh.node_to_elements()[i]:
            conn = self.mesh.elements[e]
            u_e = u[conn].copy()
            u_e[loc] = 0.0
            base_q = u_e @ basis  # (nq,)
            u_q = base_q[None, :] + np.outer(ys, basis[loc])
            f_q = np.zeros_like(u_q)
            for k, table in self.coef_tables:
                f_q += table[e] * u_q**k
            out += self.tables.jac[e] * (f_q @ self.tables.wbasis[loc])
            krow = self.tables.k_loc[e, loc]
            out += krow @ u_e + krow[loc] * ys
        # boundary parts touching node i
        brow = self.bmat.getrow(i)
        if brow.nnz:
            for c, v in zip(brow.indices, brow.data):
                out += v * ys if c == i else np.full_like(out, v * u[c])
        out -= self.bload[i]
        return out

    def residual_component(self, u: np.ndarray, i: int) -> float:
        return float(self.component_probe(u, i, np.array([u[i]]))[0])

    def norm(self, rvec: np.ndarray) -> float:
        """Mass-scaled Euclidean norm h^(d/2) * |r|_2 used by all thresholds."""
        return float(np.sqrt(self.mesh.h**self.mesh.dim) * np.linalg.norm(rvec))


def get_assembler(mesh: MeshLevel, spec: ProblemSpec) -> Assembler:
    """Per-(mesh, spec) assembler, cached on the mesh level."""
    key = ("assembler", id(spec))
    hit = mesh._cache.get(key)
    if hit is None or hit[0] is not spec:
        hit = (spec, Assembler(mesh, spec))
        mesh._cache[key] = hit
    return hit[1]


def residual(mesh: MeshLevel, spec: ProblemSpec, u: np.ndarray) -> np.ndarray:
    """Free-node residual of the discrete problem at nodal vector u."""
    return get_assembler(mesh, spec).residual(np.asarray(u, dtype=float))


def jacobian(mesh: MeshLevel, spec: ProblemSpec, u: np.ndarray) -> sp.csr_matrix:
    """Free-node Jacobian of the residual at nodal vector u."""
    return get_assembler(mesh, spec).jacobian(np.asarray(u, dtype=float))


def residual_norm(mesh: MeshLevel, rvec: np.ndarray) -> float:
    return float(np.sqrt(mesh.h**mesh.dim) * np.linalg.norm(rvec))


def energy_norms(mesh: MeshLevel, u: np.ndarray, v=None):
    """L2 and full H1 norm of the piecewise-linear difference u - v.

    Closed elementwise formulas (the integrands are quadratic), so the values
    are exact up to rounding.
    """
    e = np.asarray(u, dtype=float)
    if v is not None:
        e = e - np.asarray(v, dtype=float)
    conn = mesh.elements
    if mesh.dim == 1:
        a, b = e[conn[:, 0]], e[conn[:, 1]]
        length = mesh.nodes[conn[:, 1]] - mesh.nodes[conn[:, 0]]
        l2sq = np.sum(length * (a * a + a * b + b * b) / 3.0)
        h1semi = np.sum((b - a) ** 2 / length)
    else:
        vals = e[conn]  # (m, 3)
        coords = mesh.nodes[conn]
        d1 = coords[:, 1] - coords[:, 0]
        d2 = coords[:, 2] - coords[:, 0]
        det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
        area = 0.5 * np.abs(det)
        a, b, c = vals[:, 0], vals[:, 1], vals[:, 2]
        l2sq = np.sum(
            area / 6.0 * (a * a + b * b + c * c + a * b + b * c + c * a)
        )
        g1 = np.stack([d2[:, 1], -d2[:, 0]], axis=1) / det[:, None]
        g2 = np.stack([-d1[:, 1], d1[:, 0]], axis=1) / det[:, None]
        grad = (b - a)[:, None] * g1 + (c - a)[:, None] * g2
        h1semi = np.sum(area * np.sum(grad * grad, axis=1))
    l2 = math.sqrt(max(l2sq, 0.0))
    return l2, math.sqrt(max(l2sq + h1semi, 0.0))
