"""Critical clearing times and sensitivities for constrained dynamical systems."""

from .errors import (
    BracketCollapse,
    CctError,
    ConfigError,
    DegenerateGeometry,
    DimensionMismatch,
    EmptyCombinedBoundary,
    InconclusiveRun,
    ModeChangedAcrossStep,
    NoEquilibriumFound,
    NoFiniteCct,
    NumericalBlowup,
    OutOfRange,
    SingularJacobian,
    StiffnessFailure,
    TangentialIntersection,
    UnsupportedMode,
)
from .model import (
    ConstrainedSystem,
    Constraint,
    EquilibriumClass,
    EquilibriumResult,
    Phase,
    PhaseDynamics,
    SmibParams,
    eval_f,
    eval_jacobians,
    find_equilibrium,
    sep_sensitivity,
    smib_system,
    system_from_expressions,
)
from .integrator import (
    Event,
    EventConfig,
    EventKind,
    IntegrationOptions,
    SensitivityBundle,
    Trajectory,
    integrate,
    integrate_with_sensitivities,
)
from .cct import (
    CctOptions,
    CriticalResult,
    InstabilityMode,
    PostFaultClassification,
    classify_post_fault,
    clearing_outcome,
    compute_cct,
)
from .boundary import (
    BoundaryPoint,
    CellClass,
    GridSpec,
    PseudoEpClass,
    PseudoEpKind,
    SrGrid,
    classify_grid_point,
    classify_pseudo_ep,
    combined_H,
    combined_constraints,
    combined_guard,
    crossing_labeler,
    eval_H,
    eval_H_dot,
    eval_H_dot_gradients,
    eval_H_gradients,
    eval_H_hessians,
    phase_guard,
    sample_stability_region,
    transformed_field,
)
from .sensitivity import (
    FaultSensitivityMatrices,
    PostFaultMatrices,
    SensitivityResult,
    cct_sensitivity,
    cct_sensitivity_mode1,
    cct_sensitivity_mode2,
    fault_matrices,
    post_matrices,
)
from .validate import (
    ORACLE_CSV_HEADER,
    OracleReport,
    compare,
    compare_abs,
    fd_cct_slope,
    fd_trajectory_sensitivity,
    oracle_csv_row,
    oracle_suite,
    scan_cct,
)

__version__ = "0.1.0"
