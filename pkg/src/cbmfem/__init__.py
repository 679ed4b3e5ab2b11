"""Companion-based multilevel FEM for multiple solutions of semilinear PDEs."""

from .mesh import (
    MeshLevel, NodeTag, build_hierarchy, build_initial_mesh, mesh_to_dict,
    refine,
)
from .nonlinearity import (
    BCond, BoundarySpec, Constant, Domain, PolyNonlinearity, PolyX, PowerAbs,
    ProblemSpec, SineProduct, coef_fn, dirichlet, interval, neumann, robin,
    unit_square,
)
from .assembly import energy_norms, jacobian, residual, residual_norm
from .companion import (
    DegeneratePolynomialError, RootSet, UniPoly, companion_matrix,
    local_polynomial, poly_roots, real_roots,
)
from .multilevel import (
    FilterConfig, LevelDiagnostics, SolutionRecord, SolutionSet, SolverError,
    apply_filters, cbmfem_run, dedup, enumerate_guesses, interpolate, newton,
    solve_level0,
)
from .systems import (
    ReducedLevelProblem, TwoFieldSpec, reduce_system, solve_system,
    two_field_residual,
)
from .analysis import (
    BranchSummary, BranchTrace, ConvergenceRow, ConvergenceTable,
    OracleSolution, convergence_table, match_branches, parameter_sweep,
    shooting_oracle_1d, summarize_set, trace_lineage,
)
from .problems import PRESETS, Preset, get_preset
from .config import ConfigError, ProblemConfig, load_config

__version__ = "0.1.0"
