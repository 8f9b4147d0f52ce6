"""Two-scale FEM solver for a coupled elliptic-parabolic two-pressure system."""

from ._accel import HAVE_NUMBA, backend
from .mesh import Mark, MeshError, SimplexMesh, build_uniform, patch_index, refine
from .fem import P1Space, SolverError, make_space
from .system import (
    AssumptionError,
    CoupledState,
    ModelParams,
    ReactionTerm,
    SystemOperators,
    assemble_system,
    coupling_matrix,
    default_reaction,
    elliptic_solve,
    initial_state,
    load_state,
    save_state,
    step,
    validate_problem,
    zero_reaction,
)
from .estimator import EstimatorReport, adapt_loop, estimate, residual_pairing
from .harness import (
    ManufacturedProblem,
    bilinear_problem,
    convergence_study,
    default_problem,
    effectivity_study,
    error_norms,
    ritz_rate_study,
    run_problem,
    source_consistency,
    two_scale_project,
)

__version__ = "0.1.0"

__all__ = [
    "HAVE_NUMBA",
    "backend",
    "Mark",
    "MeshError",
    "SimplexMesh",
    "build_uniform",
    "patch_index",
    "refine",
    "P1Space",
    "SolverError",
    "make_space",
    "AssumptionError",
    "CoupledState",
    "ModelParams",
    "ReactionTerm",
    "SystemOperators",
    "assemble_system",
    "coupling_matrix",
    "default_reaction",
    "elliptic_solve",
    "initial_state",
    "load_state",
    "save_state",
    "step",
    "validate_problem",
    "zero_reaction",
    "EstimatorReport",
    "adapt_loop",
    "estimate",
    "residual_pairing",
    "ManufacturedProblem",
    "bilinear_problem",
    "convergence_study",
    "default_problem",
    "effectivity_study",
    "error_norms",
    "ritz_rate_study",
    "run_problem",
    "source_consistency",
    "two_scale_project",
    "__version__",
]
