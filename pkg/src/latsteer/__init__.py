"""Single-forced particle chains on the line: dynamics, Lie-bracket
accessibility tests, degeneracy classification, invariant-plane
counterexamples, steering plans, and energy-box bounds.
"""

from .analysis import (
    CompactnessReport,
    ConservationReport,
    EnergyBox,
    conservation_report,
    lebesgue_bound,
    verify_compactness,
)
from .brackets import (
    BracketVector,
    DegeneracyReport,
    RankReport,
    VectorFieldHandle,
    accessibility_family,
    bracket_handle,
    closed_form_bracket_family,
    control_handle,
    degeneracy_scan,
    drift_handle,
    energy_derivative,
    genericity_determinant,
    kalman_rank,
    lie_rank,
    numeric_bracket,
    spanning_chain,
)
from .configio import Config, ConfigError, parse_config_file, parse_config_text
from .counterexamples import (
    Plane,
    build_nonperiodic_trimer,
    build_periodic_degenerate_trimer,
    invariant_plane_residual,
)
from .dynamics import (
    ControlSignal,
    IntegratorPolicy,
    NumericalFailure,
    Trajectory,
    controlled_flow,
    free_flow,
    free_flow_trajectory,
    reference_endpoint,
    reverse_flow_oracle,
)
from .potentials import (
    Potential,
    check_derivative_consistency,
    harmonic,
    polynomial,
    quartic,
    shifted_odd,
    toda,
)
from .steering import (
    ConjugatedFlow,
    ConstantLeg,
    FreeFlow,
    GShift,
    PlanResult,
    Pulse,
    RecurrenceResult,
    ReverseFlowResult,
    SteeringPlan,
    conjugated_flow,
    execute_plan,
    g_shift,
    plan_steering,
    project_to_zero_momentum,
    pulse,
    recurrence_search,
    reverse_flow_approx,
)
from .system import LatticeConfig, LatticeSystem, State, feedback_decouple

__version__ = "0.1.0"

__all__ = [
    "BracketVector",
    "CompactnessReport",
    "Config",
    "ConfigError",
    "ConjugatedFlow",
    "ConservationReport",
    "ConstantLeg",
    "ControlSignal",
    "DegeneracyReport",
    "EnergyBox",
    "FreeFlow",
    "GShift",
    "IntegratorPolicy",
    "LatticeConfig",
    "LatticeSystem",
    "NumericalFailure",
    "Plane",
    "PlanResult",
    "Potential",
    "Pulse",
    "RankReport",
    "RecurrenceResult",
    "ReverseFlowResult",
    "State",
    "SteeringPlan",
    "Trajectory",
    "VectorFieldHandle",
    "accessibility_family",
    "bracket_handle",
    "build_nonperiodic_trimer",
    "build_periodic_degenerate_trimer",
    "check_derivative_consistency",
    "closed_form_bracket_family",
    "conjugated_flow",
    "conservation_report",
    "control_handle",
    "controlled_flow",
    "degeneracy_scan",
    "drift_handle",
    "energy_derivative",
    "execute_plan",
    "feedback_decouple",
    "free_flow",
    "free_flow_trajectory",
    "g_shift",
    "genericity_determinant",
    "harmonic",
    "invariant_plane_residual",
    "kalman_rank",
    "lebesgue_bound",
    "lie_rank",
    "numeric_bracket",
    "parse_config_file",
    "parse_config_text",
    "plan_steering",
    "polynomial",
    "project_to_zero_momentum",
    "pulse",
    "quartic",
    "recurrence_search",
    "reference_endpoint",
    "reverse_flow_approx",
    "reverse_flow_oracle",
    "shifted_odd",
    "spanning_chain",
    "toda",
    "verify_compactness",
]
