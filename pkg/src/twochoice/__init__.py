"""Numerical toolkit for the two-choice queueing model.

Exact event simulation of M parallel servers under join-the-shorter-of-d
sampled queues, the truncated mean-field dynamics in tail coordinates,
weighted-l1 decay certificates, sensitivity and second-order remainder
bounds, a Poisson-equation decomposition of the stationary mean-square
error, and the experiment harness that measures how that error scales
with M.
"""

from .core import (
    ModelParams,
    OccupancyState,
    ShiftedState,
    TailState,
    equilibrium,
    shift,
    to_tail,
    unshift,
)
from .harness import (
    ExperimentConfig,
    RateStudyResult,
    RateStudyRow,
    SlopeFit,
    envelope_bound,
    random_shifted_start,
    rate_study,
    version_string,
    write_rate_study_csv,
    write_summary_json,
    write_trajectory_csv,
)
from .lyapunov import (
    DecayReport,
    LyapunovCert,
    base_weights,
    k_lambda,
    k_tilde,
    tilde_weights,
    verify_decay,
)
from .meanfield import (
    ConvergenceTimeout,
    IntegratorConfig,
    StiffnessError,
    Trajectory,
    default_truncation,
    integrate,
    rhs_shifted,
    rhs_truncated,
    solve_to_equilibrium,
)
from .perturbation import (
    AugmentedTrajectory,
    EnvelopeReport,
    RemainderReport,
    SensitivitySetup,
    envelope_l1_integral,
    integrate_sensitivity,
    jacobian,
    remainder,
    remainder_bound_check,
    sensitivity_envelope_check,
)
from .simulator import (
    Event,
    SimConfig,
    StationaryEstimate,
    apply_event,
    estimate_mse,
    next_event,
    sample_stationary_states,
    simulate,
)
from .stein import (
    GCache,
    GEvaluation,
    SteinReport,
    bar_check,
    g_gradient_dir,
    g_value,
    generator_apply_g,
    generator_neighbors,
    stein_decomposition,
    transition_residuals,
)

__all__ = [
    "ModelParams",
    "OccupancyState",
    "TailState",
    "ShiftedState",
    "equilibrium",
    "to_tail",
    "shift",
    "unshift",
    "IntegratorConfig",
    "Trajectory",
    "StiffnessError",
    "ConvergenceTimeout",
    "rhs_truncated",
    "rhs_shifted",
    "integrate",
    "solve_to_equilibrium",
    "default_truncation",
    "LyapunovCert",
    "DecayReport",
    "k_lambda",
    "k_tilde",
    "base_weights",
    "tilde_weights",
    "verify_decay",
    "SensitivitySetup",
    "AugmentedTrajectory",
    "EnvelopeReport",
    "RemainderReport",
    "jacobian",
    "integrate_sensitivity",
    "sensitivity_envelope_check",
    "envelope_l1_integral",
    "remainder",
    "remainder_bound_check",
    "SimConfig",
    "Event",
    "StationaryEstimate",
    "next_event",
    "apply_event",
    "simulate",
    "estimate_mse",
    "sample_stationary_states",
    "GEvaluation",
    "GCache",
    "SteinReport",
    "g_value",
    "g_gradient_dir",
    "generator_neighbors",
    "generator_apply_g",
    "transition_residuals",
    "bar_check",
    "stein_decomposition",
    "ExperimentConfig",
    "RateStudyRow",
    "SlopeFit",
    "RateStudyResult",
    "version_string",
    "random_shifted_start",
    "rate_study",
    "envelope_bound",
    "write_rate_study_csv",
    "write_summary_json",
    "write_trajectory_csv",
]
