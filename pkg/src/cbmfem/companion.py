"""Companion-matrix root finding for the local one-node polynomials.

Freezing every nodal value except one turns a residual component into a
univariate polynomial in that node's value.  Its coefficients are recovered
exactly by probing the residual at degree+1 Chebyshev points and solving the
Vandermonde system; the roots are then the eigenvalues of the companion
matrix of the polynomial.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .assembly import get_assembler
from .mesh import MeshLevel
from .nonlinearity import ProblemSpec

TRIM_REL_TOL = 1e-12


class DegeneratePolynomialError(ValueError):
    """Raised for polynomials with no well-defined roots (degree < 1)."""


@dataclass(frozen=True)
class UniPoly:
    """Univariate polynomial, coefficients ascending, highest one nonzero."""

    coeffs: np.ndarray

    def __post_init__(self):
        c = np.atleast_1d(np.asarray(self.coeffs, dtype=float))
        object.__setattr__(self, "coeffs", trim_coeffs(c))
        self.coeffs.setflags(write=False)

    @property
    def degree(self) -> int:
        return len(self.coeffs) - 1

    def __call__(self, y):
        return np.polynomial.polynomial.polyval(y, self.coeffs)


def trim_coeffs(c: np.ndarray, rel_tol: float = TRIM_REL_TOL) -> np.ndarray:
    """Strip trailing coefficients that are negligible next to the largest."""
    scale = np.max(np.abs(c))
    if scale == 0.0:
        return np.zeros(1)
    keep = len(c)
    while keep > 1 and abs(c[keep - 1]) <= rel_tol * scale:
        keep -= 1
    return np.array(c[:keep])


@dataclass(frozen=True)
class RootSet:
    """All complex roots of a polynomial, sorted by (real, imag)."""

    poly: UniPoly
    roots: np.ndarray

    def residuals(self) -> np.ndarray:
        return np.abs(self.poly(self.roots))


def chebyshev_points(radius: float, n: int) -> np.ndarray:
    """n Chebyshev points on [-radius, radius]."""
    j = np.arange(n)
    return radius * np.cos(np.pi * (2 * j + 1) / (2 * n))


def local_polynomial(mesh: MeshLevel, spec: ProblemSpec, frozen: np.ndarray,
                     i: int) -> UniPoly:
    """Residual component i as a polynomial in node i's value.

    Every other entry of `frozen` stays fixed.  The result is exact (up to
    rounding) because the component is a polynomial of degree at most
    max(deg f, 1) in that value under the fixed quadrature rule.
    """
    asm = get_assembler(mesh, spec)
    max_deg = max(spec.f.degree, 1)
    radius = max(1.0, 2.0 * abs(frozen[i]))
    probes = chebyshev_points(radius, max_deg + 1)
    values = asm.component_probe(np.asarray(frozen, dtype=float), i, probes)
    vand = np.polynomial.polynomial.polyvander(probes, max_deg)
    return UniPoly(np.linalg.solve(vand, values))


def companion_matrix(p: UniPoly) -> np.ndarray:
    """Companion matrix whose eigenvalues are the roots of p.

    For p(y) = sum c_j y^j of degree m: ones on the subdiagonal and
    -c_{j-1}/c_m down the last column.
    """
    m = p.degree
    if m < 1:
        raise DegeneratePolynomialError(
            f"cannot build a companion matrix for degree {m}"
        )
    c = p.coeffs
    mat = np.zeros((m, m))
    mat[np.arange(1, m), np.arange(m - 1)] = 1.0
    mat[:, m - 1] = -c[:m] / c[m]
    return mat


def poly_roots(p: UniPoly) -> RootSet:
    """All complex roots of p via the companion-matrix eigenproblem."""
    if p.degree < 1:
        raise DegeneratePolynomialError(
            "root finding needs a polynomial of degree >= 1"
        )
    # uniform scaling leaves the companion entries unchanged but keeps the
    # coefficient magnitudes sane for the residual check downstream
    scaled = UniPoly(p.coeffs / np.max(np.abs(p.coeffs)))
    roots = np.linalg.eigvals(companion_matrix(scaled))
    order = np.lexsort((roots.imag, roots.real))
    return RootSet(poly=p, roots=roots[order])


def real_roots(rs: RootSet, mode: str = "real_only", imag_tol: float = 1e-9,
               dedup_tol: float = 1e-8) -> np.ndarray:
    """Real root candidates of a root set.

    mode 'real_only' keeps roots with |Im z| <= imag_tol * (1 + |Re z|);
    mode 'real_parts' keeps the real part of every root.  Either way the
    survivors are sorted and deduplicated within dedup_tol (relative, with
    floor 1).
    """
    z = rs.roots
    if mode == "real_only":
        sel = np.abs(z.imag) <= imag_tol * (1.0 + np.abs(z.real))
        vals = z.real[sel]
    elif mode == "real_parts":
        vals = z.real.copy()
    else:
        raise ValueError(f"unknown root mode {mode!r}")
    if vals.size == 0:
        return vals
    vals = np.sort(vals)
    kept = [vals[0]]
    for v in vals[1:]:
        if abs(v - kept[-1]) > dedup_tol * max(1.0, abs(kept[-1])):
            kept.append(v)
    return np.array(kept)
