"""Ready-made benchmark problems with calibrated solver settings.

Each preset bundles a problem builder with the filter constants that were
tuned to recover the full known solution set on that problem.  The library
defaults in FilterConfig are intentionally generic; several benchmarks need
wider locality/convergence windows (the residual of an interpolated coarse
solution shrinks only linearly in h, so fixed constants must be sized for
the levels where combinatorial search actually runs).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Union

from .multilevel import FilterConfig
from .nonlinearity import (
    BoundarySpec,
    Constant,
    PolyNonlinearity,
    PowerAbs,
    ProblemSpec,
    SineProduct,
    dirichlet,
    interval,
    neumann,
    unit_square,
)
from .systems import TwoFieldSpec

AnySpec = Union[ProblemSpec, TwoFieldSpec]


@dataclass(frozen=True)
class Preset:
    """A named benchmark: builder, tuned solver settings, default depth."""

    name: str
    description: str
    kind: str                      # "scalar" or "system"
    build: Callable[..., AnySpec]
    solver: FilterConfig
    default_levels: int
    params: dict = field(default_factory=dict)
    in_acceptance: bool = True

    def spec(self, **overrides) -> AnySpec:
        merged = dict(self.params)
        for key, value in overrides.items():
            if key not in merged:
                raise KeyError(
                    f"preset {self.name!r} has no parameter {key!r}; "
                    f"known: {sorted(merged)}"
                )
            merged[key] = value
        return self.build(**merged)


def _quartic_neumann() -> ProblemSpec:
    # -u'' = 1 + u^4 on (0,1), u'(0) = 0, u(1) = 0
    return ProblemSpec(
        domain=interval(0.0, 1.0),
        boundary=BoundarySpec({"left": neumann(), "right": dirichlet(0.0)}),
        f=PolyNonlinearity([(0, Constant(-1.0)), (4, Constant(-1.0))]),
        name="ex1",
    )


def _quadratic_ramp() -> ProblemSpec:
    # -u'' = -u^2 on (0,1), u(0) = 0, u(1) = 1
    return ProblemSpec(
        domain=interval(0.0, 1.0),
        boundary=BoundarySpec({"left": dirichlet(0.0), "right": dirichlet(1.0)}),
        f=PolyNonlinearity([(2, Constant(1.0))]),
        name="ex2",
    )


def _bistable(p: float) -> ProblemSpec:
    # -u'' = u^2 (p - u^2) on (0,1), u'(0) = 0, u(1) = 0
    return ProblemSpec(
        domain=interval(0.0, 1.0),
        boundary=BoundarySpec({"left": neumann(), "right": dirichlet(0.0)}),
        f=PolyNonlinearity([(2, Constant(-p)), (4, Constant(1.0))]),
        name="ex3",
    )


def _weighted_cubic(r: float, d: float) -> ProblemSpec:
    # -u'' = d^(r-2) |x|^r u^3 on (-1,1), u(-1) = u(1) = 0
    return ProblemSpec(
        domain=interval(-1.0, 1.0),
        boundary=BoundarySpec({"left": dirichlet(0.0), "right": dirichlet(0.0)}),
        f=PolyNonlinearity([(3, PowerAbs(-(d ** (r - 2.0)), r))]),
        name="ex4",
    )


def _forced_quadratic_2d(s: float) -> ProblemSpec:
    # Delta u + u^2 = s sin(pi x) sin(pi y) on the unit square, u = 0 on
    # the boundary; in -u'' + f form: f = -u^2 + s sin(pi x) sin(pi y)
    return ProblemSpec(
        domain=unit_square(),
        boundary=BoundarySpec({side: dirichlet(0.0)
                               for side in ("left", "right", "bottom", "top")}),
        f=PolyNonlinearity([(2, Constant(-1.0)), (0, SineProduct(s))]),
        name="sine2d",
    )


def _schnakenberg(eta: float, a: float, b: float, d: float) -> TwoFieldSpec:
    return TwoFieldSpec.schnakenberg(eta=eta, a=a, b=b, d=d)


def _gray_scott(d_a: float, d_s: float, mu: float, rho: float) -> TwoFieldSpec:
    return TwoFieldSpec.gray_scott(d_a=d_a, d_s=d_s, mu=mu, rho=rho)


PRESETS: dict[str, Preset] = {}


def _register(preset: Preset):
    PRESETS[preset.name] = preset


_register(Preset(
    name="ex1",
    description="1D quartic source, no-flux left end; two positive solutions",
    kind="scalar",
    build=_quartic_neumann,
    solver=FilterConfig(),
    default_levels=6,
))

_register(Preset(
    name="ex2",
    description="1D quadratic absorption with ramp boundary values; "
                "two solutions",
    kind="scalar",
    build=_quadratic_ramp,
    solver=FilterConfig(c2=1.0e4),
    default_levels=6,
))

_register(Preset(
    name="ex3",
    description="1D bistable quartic with strength parameter p; the count "
                "grows with p (2 / 4 / 8 at p = 1 / 7 / 18)",
    kind="scalar",
    build=_bistable,
    solver=FilterConfig(c1=50.0, c2=1.0e5, root_mode="real_parts"),
    default_levels=5,
    params={"p": 7.0},
))

_register(Preset(
    name="ex4",
    description="1D cubic with |x|^r weight on (-1,1); rich sign-changing "
                "solution family, four nonnegative members",
    kind="scalar",
    build=_weighted_cubic,
    solver=FilterConfig(c2=1.0e5),
    default_levels=6,
    params={"r": 3.0, "d": 1.0},
))

_register(Preset(
    name="schnakenberg",
    description="1D activator-substrate kinetics, no-flux ends; constant "
                "state plus a mirrored pattern pair",
    kind="system",
    build=_schnakenberg,
    solver=FilterConfig(c1=50.0, c2=1.0e5, root_mode="real_parts"),
    default_levels=5,
    params={"eta": 50.0, "a": 1.0 / 3.0, "b": 2.0 / 3.0, "d": 50.0},
))

_register(Preset(
    name="sine2d",
    description="2D quadratic with separable sine forcing on the unit "
                "square; ten solutions in four symmetry orbits",
    kind="scalar",
    build=_forced_quadratic_2d,
    solver=FilterConfig(c2=1.0e4, c3=1000.0, root_mode="real_parts"),
    default_levels=3,
    params={"s": 1600.0},
))

_register(Preset(
    name="gray_scott",
    description="2D activator-substrate kinetics on the unit square, "
                "no-flux boundary (exploratory; large solution families)",
    kind="system",
    build=_gray_scott,
    solver=FilterConfig(c1=50.0, c2=1.0e5, root_mode="real_parts"),
    default_levels=2,
    params={"d_a": 2.5e-4, "d_s": 5.0e-5, "mu": 0.065, "rho": 0.04},
    in_acceptance=False,
))


def get_preset(name: str) -> Preset:
    try:
        return PRESETS[name]
    except KeyError:
        known = ", ".join(sorted(PRESETS))
        raise KeyError(f"unknown preset {name!r}; available: {known}") from None
