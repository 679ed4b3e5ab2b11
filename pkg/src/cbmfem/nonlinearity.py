"""Problem data: polynomial nonlinearities f(x, u), boundary conditions, domains.

The solver works on problems of the form

    -lap(u) + f(x, u) = 0,   f(x, u) = sum_k g_k(x) * u**k,

with mixed Dirichlet / Neumann / Robin boundary data.  Everything here is a
plain frozen dataclass; evaluation is vectorised over numpy arrays of points.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .mesh import MeshLevel, NodeTag, build_hierarchy

MAX_POLY_DEGREE = 12


# ---------------------------------------------------------------------------
# coefficient functions g_k(x)

@dataclass(frozen=True)
class Constant:
    """g(x) = c.

    Returns a scalar; callers broadcast it against their point arrays, which
    sidesteps guessing whether the trailing axis of x holds coordinates.
    """

    c: float
    dims = (1, 2)
    x_degree = 0

    def __call__(self, x):
        return np.float64(self.c)


@dataclass(frozen=True)
class PowerAbs:
    """g(x) = c * |x|**r on an interval, r >= 0."""

    c: float
    r: float
    dims = (1,)

    def __post_init__(self):
        if self.r < 0:
            raise ValueError(f"power_abs needs r >= 0, got r={self.r}")

    @property
    def x_degree(self):
        r = self.r
        return int(r) if float(r).is_integer() else None

    def __call__(self, x):
        return self.c * np.abs(x) ** self.r


@dataclass(frozen=True)
class PolyX:
    """g(x) = polynomial in x with the given ascending coefficients."""

    coeffs: tuple
    dims = (1,)

    def __post_init__(self):
        if len(self.coeffs) == 0:
            raise ValueError("poly_x needs at least one coefficient")

    @property
    def x_degree(self):
        return len(self.coeffs) - 1

    def __call__(self, x):
        return np.polynomial.polynomial.polyval(x, np.asarray(self.coeffs))


@dataclass(frozen=True)
class SineProduct:
    """g(x, y) = s * sin(pi x) * sin(pi y) on the unit square."""

    s: float
    dims = (2,)
    x_degree = None

    def __call__(self, x):
        if x.ndim < 2 or x.shape[-1] != 2:
            raise ValueError("sine_product expects points with shape (..., 2)")
        return self.s * np.sin(np.pi * x[..., 0]) * np.sin(np.pi * x[..., 1])


_COEF_KINDS = {
    "constant": Constant,
    "power_abs": PowerAbs,
    "poly_x": PolyX,
    "sine_product": SineProduct,
}


def coef_fn(kind: str, **params):
    """Build a coefficient function by kind name (config entry point)."""
    try:
        cls = _COEF_KINDS[kind]
    except KeyError:
        raise ValueError(
            f"unknown coefficient kind {kind!r}; expected one of {sorted(_COEF_KINDS)}"
        ) from None
    if kind == "poly_x" and "coeffs" in params:
        params = {**params, "coeffs": tuple(params["coeffs"])}
    return cls(**params)


# ---------------------------------------------------------------------------
# f(x, u) = sum_k g_k(x) u^k

@dataclass(frozen=True)
class PolyNonlinearity:
    """Polynomial-in-u nonlinearity with spatially varying coefficients.

    terms maps each power k to its coefficient function; at most one term per
    power, 0 <= k <= MAX_POLY_DEGREE.
    """

    terms: tuple  # of (power, coefficient function)

    def __post_init__(self):
        if len(self.terms) == 0:
            raise ValueError("nonlinearity needs at least one term; "
                             "use a zero constant term for f = 0")
        seen = set()
        for k, coef in self.terms:
            if not isinstance(k, (int, np.integer)) or k < 0:
                raise ValueError(f"term power must be an integer >= 0, got {k!r}")
            if k > MAX_POLY_DEGREE:
                raise ValueError(
                    f"term power {k} exceeds the degree cap {MAX_POLY_DEGREE}"
                )
            if k in seen:
                raise ValueError(f"duplicate term for power {k}")
            seen.add(k)
        object.__setattr__(self, "terms", tuple((int(k), c) for k, c in self.terms))

    @property
    def degree(self) -> int:
        return max((k for k, _ in self.terms), default=0)

    def eval_f(self, x, u):
        """f(x, u), vectorised over matching point/value arrays."""
        u = np.asarray(u, dtype=float)
        out = np.zeros(np.broadcast_shapes(u.shape, _point_shape(x)))
        for k, coef in self.terms:
            out += coef(x) * u**k
        return out

    def eval_df(self, x, u):
        """df/du at (x, u)."""
        u = np.asarray(u, dtype=float)
        out = np.zeros(np.broadcast_shapes(u.shape, _point_shape(x)))
        for k, coef in self.terms:
            if k >= 1:
                out += k * coef(x) * u ** (k - 1)
        return out


def _point_shape(x):
    x = np.asarray(x)
    return x.shape[:-1] if x.ndim > 1 and x.shape[-1] == 2 else x.shape


# ---------------------------------------------------------------------------
# boundary conditions and domains

@dataclass(frozen=True)
class BCond:
    """Condition on one boundary segment.

    kind 'dirichlet' pins u to `value`; 'neumann' and 'robin' contribute
    ratio*u - g to the co-normal flux, entering the weak form as boundary
    integrals of ratio*u*phi and g*phi (ratio = 0 for plain Neumann).
    """

    kind: str
    value: float = 0.0
    ratio: float = 0.0  # alpha/beta for robin
    g: float = 0.0

    def __post_init__(self):
        if self.kind not in ("dirichlet", "neumann", "robin"):
            raise ValueError(f"unknown boundary kind {self.kind!r}")
        if self.kind == "robin" and self.ratio < 0:
            raise ValueError("robin boundary needs ratio alpha/beta >= 0")


def dirichlet(value: float = 0.0) -> BCond:
    return BCond("dirichlet", value=value)


def neumann(g: float = 0.0) -> BCond:
    return BCond("neumann", g=g)


def robin(ratio: float, g: float = 0.0) -> BCond:
    return BCond("robin", ratio=ratio, g=g)


_SEGMENTS = {1: ("left", "right"), 2: ("left", "right", "bottom", "top")}


@dataclass(frozen=True)
class BoundarySpec:
    """Boundary condition per segment ('left'/'right', plus 'bottom'/'top' in 2d)."""

    segments: dict

    def __post_init__(self):
        dims = [d for d, names in _SEGMENTS.items()
                if set(self.segments) == set(names)]
        if not dims:
            raise ValueError(
                f"boundary segments {sorted(self.segments)} match neither an "
                f"interval nor the unit square"
            )

    def tags_by_segment(self) -> dict:
        return {name: bc.kind for name, bc in self.segments.items()}

    def __getitem__(self, name: str) -> BCond:
        return self.segments[name]


@dataclass(frozen=True)
class Domain:
    kind: str  # 'interval' or 'unit_square'
    a: float = 0.0
    b: float = 1.0

    def __post_init__(self):
        if self.kind not in ("interval", "unit_square"):
            raise ValueError(f"unknown domain kind {self.kind!r}")
        if self.kind == "interval" and not self.b > self.a:
            raise ValueError(f"interval needs b > a, got [{self.a}, {self.b}]")

    @property
    def dim(self) -> int:
        return 1 if self.kind == "interval" else 2


def interval(a: float, b: float) -> Domain:
    return Domain("interval", a, b)


def unit_square() -> Domain:
    return Domain("unit_square")


@dataclass(frozen=True)
class ProblemSpec:
    """Scalar problem -lap(u) + f(x, u) = 0 with boundary data."""

    domain: Domain
    boundary: BoundarySpec
    f: PolyNonlinearity
    name: str = ""

    def __post_init__(self):
        expected = set(_SEGMENTS[self.domain.dim])
        if set(self.boundary.segments) != expected:
            raise ValueError(
                f"domain {self.domain.kind!r} needs boundary segments "
                f"{sorted(expected)}, got {sorted(self.boundary.segments)}"
            )
        for _, coef in self.f.terms:
            if self.domain.dim not in coef.dims:
                raise ValueError(
                    f"coefficient {coef} is not defined in {self.domain.dim}d"
                )

    def build_hierarchy(self, max_level: int) -> list:
        return build_hierarchy(
            self.domain, self.boundary.tags_by_segment(), max_level
        )

    def dirichlet_values(self, mesh: MeshLevel) -> np.ndarray:
        """Per-node vector of prescribed values (zero at free nodes)."""
        vals = np.zeros(mesh.n_nodes)
        if mesh.dim == 1:
            for name, idx in (("left", 0), ("right", mesh.n_nodes - 1)):
                bc = self.boundary[name]
                if bc.kind == "dirichlet":
                    vals[idx] = bc.value
        else:
            x, y = mesh.nodes[:, 0], mesh.nodes[:, 1]
            on = {"left": x == 0.0, "right": x == 1.0,
                  "bottom": y == 0.0, "top": y == 1.0}
            for name in ("left", "right", "bottom", "top"):
                bc = self.boundary[name]
                if bc.kind == "dirichlet":
                    vals[on[name]] = bc.value
        vals[mesh.boundary_tags != NodeTag.DIRICHLET] = 0.0
        return vals
