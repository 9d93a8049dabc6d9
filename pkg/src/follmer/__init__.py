"""Point-source generative diffusions via stochastic interpolants.

Builds diffusions that carry a point mass at the origin to a target
distribution over [0, 1]: exact and regression-estimated drifts,
a-posteriori diffusion-coefficient tuning, the KL-optimal coefficient and
its linear reference process, SDE simulation (including singular
initial-time drifts), and path-space KL / schedule-invariance analysis.
"""

from .errors import (
    BoundUnavailableError,
    ConfigError,
    DegenerateReferenceError,
    DomainError,
    EvaluationError,
    FittingError,
    FollmerError,
    InvalidDiffusionError,
    MonotonicityError,
    ScheduleError,
    SimulationDivergenceError,
    TargetError,
    TruncationError,
)
from .schedules import (
    CATALOG_NAMES,
    MONOTONE_CATALOG,
    FollmerScheduleData,
    NamedTimeFunction,
    Schedule,
    ScheduleCoefficients,
    ValidationReport,
    coefficients_at,
    follmer_schedule_data,
    follmer_schedule_data_for,
    g_baseline_fn,
    g_constant_fn,
    g_follmer_fn,
    g_follmer_squared,
    g_table_fn,
    get_schedule,
    noise_level_map,
    reference_rate,
    reference_rate_fn,
    validate_schedule,
)
from .targets import (
    GaussianMixtureTarget,
    QuadratureTarget1D,
    make_quadrature_target,
    marginal_moments,
    posterior_mean,
    posterior_z_mean,
    sample,
    score_q,
)
from .drifts import (
    BasisSpec,
    BaselineDrift,
    EstimatedDrift,
    FollmerGenericDrift,
    SingularRemainderDrift,
    RegressionEstimator,
    TunedDrift,
    baseline_drift,
    chebyshev_knots,
    check_tuning_boundary,
    fit_follmer_regression,
    fit_regression,
    follmer_drift_generic,
    follmer_tuned_drift,
    lipschitz_bound,
    singular_decomposition,
    score_field,
    tuned_drift,
)
from .sde import (
    IntegratorConfig,
    PathEnsemble,
    derive_path_seed,
    simulate,
    simulate_reference,
    simulate_singular,
)
from .analysis import (
    DriftErrorMoments,
    EnergyDistanceResult,
    EstimatorScoreError,
    InvarianceResult,
    KlReport,
    OptimalG,
    SyntheticScoreError,
    drift_error_moments,
    energy_statistic,
    exp_decay_error,
    interpolant_draws,
    invariance_check,
    kl_path,
    kl_star,
    optimal_g,
    psi,
    sample_distance,
    schedule_invariance,
    variance_identity_check,
    zero_error,
)

__version__ = "0.1.0"
