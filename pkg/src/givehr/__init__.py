"""Three-stage regression for longitudinal biomarkers whose visit times
and measurement availability both depend on latent health status."""

from .baselines import ESTIMATORS, BaselineFit, fit_lmm, iirr_weighted, summary_regression
from .dataset import (
    Cohort,
    CovariateSeries,
    CovariateSpec,
    DataError,
    SubjectData,
    ValidationReport,
    covariate_at,
    load_long_csv,
    validate,
    write_long_csv,
)
from .inference import VarianceEstimate, bootstrap_variance, sandwich_variance
from .observation import (
    ObservationFit,
    ObservationParams,
    composite_loglik,
    fit_observation,
    kappa_value,
    marginal_obs_prob,
    probit_kernel,
)
from .outcome import (
    GivehrFit,
    OutcomeParams,
    RiskSetCenters,
    VisitPoint,
    baseline_increments,
    build_visit_points,
    compensated_process_totals,
    fit_givehr,
    risk_set_centers,
    solve_wls,
)
from .simulate import (
    SCENARIOS,
    BenchmarkTable,
    ScenarioSpec,
    SimTruth,
    generate,
    poisson_process_times,
    run_replications,
    simulated_covariate_spec,
)
from .visiting import (
    EBPosterior,
    FitError,
    StepFunction,
    VisitingFit,
    breslow_baseline,
    eb_posterior,
    fit_rate_model,
    fit_stage1,
    frailty_variance,
)

__version__ = "0.1.0"

__all__ = [
    "BaselineFit",
    "BenchmarkTable",
    "Cohort",
    "CovariateSeries",
    "CovariateSpec",
    "DataError",
    "EBPosterior",
    "ESTIMATORS",
    "FitError",
    "GivehrFit",
    "ObservationFit",
    "ObservationParams",
    "OutcomeParams",
    "RiskSetCenters",
    "SCENARIOS",
    "ScenarioSpec",
    "SimTruth",
    "StepFunction",
    "SubjectData",
    "ValidationReport",
    "VarianceEstimate",
    "VisitPoint",
    "VisitingFit",
    "baseline_increments",
    "bootstrap_variance",
    "breslow_baseline",
    "build_visit_points",
    "compensated_process_totals",
    "composite_loglik",
    "covariate_at",
    "eb_posterior",
    "fit_givehr",
    "fit_lmm",
    "fit_observation",
    "fit_rate_model",
    "fit_stage1",
    "frailty_variance",
    "generate",
    "iirr_weighted",
    "kappa_value",
    "load_long_csv",
    "marginal_obs_prob",
    "poisson_process_times",
    "probit_kernel",
    "risk_set_centers",
    "run_replications",
    "sandwich_variance",
    "simulated_covariate_spec",
    "solve_wls",
    "summary_regression",
    "validate",
    "write_long_csv",
]
