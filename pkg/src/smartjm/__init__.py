"""Joint longitudinal-survival modeling for two-stage adaptive trials.

The package estimates regimen-specific survival outcomes in trials
where non-responders to an initial treatment are re-randomized at a
fixed decision time.  A shared-random-effects joint model links a
linear mixed biomarker trajectory to a Weibull relative-risk hazard;
regimen values come from model standardization, with a weighted
Kaplan-Meier comparator and a confidence set for the best regimen.
"""

from .errors import (
    ConfigError,
    DataError,
    DegenerateContrastError,
    EvaluationError,
    FitError,
    InitializationError,
    SmartjmError,
)
from .estimation import (
    FitOptions,
    FitResult,
    InitialValues,
    ParamLayout,
    fit_joint_model,
    initialize_theta,
    observed_information,
    observed_loglik,
    observed_score,
)
from .gformula import (
    RegimenValueTable,
    marginal_survival_curve,
    propagate_uncertainty,
    regimen_values,
)
from .harness import (
    StudyConfig,
    StudyResult,
    aggregate_metrics,
    balanced_baselines,
    compute_true_values,
    run_replication,
    run_study,
)
from .iptw import (
    KmCurve,
    dtr_weight,
    iptw_values,
    iptw_with_bootstrap,
    km_rmst,
    weight_matrix,
    weighted_km,
)
from .longitudinal import LmmFit, empirical_bayes, fit_lmm, lmm_marginal_loglik
from .mcb import McbResult, mcb_best_set, mcb_cutoff
from .model import (
    DesignConfig,
    Dtr,
    SubjectRecord,
    Theta,
    latent_trajectory,
    linear_predictor,
    response_indicator,
)
from .simgen import DgmTruth, reference_truth, simulate_subject, simulate_trial

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DataError",
    "DegenerateContrastError",
    "DesignConfig",
    "DgmTruth",
    "Dtr",
    "EvaluationError",
    "FitError",
    "FitOptions",
    "FitResult",
    "InitialValues",
    "InitializationError",
    "KmCurve",
    "LmmFit",
    "McbResult",
    "ParamLayout",
    "RegimenValueTable",
    "SmartjmError",
    "StudyConfig",
    "StudyResult",
    "SubjectRecord",
    "Theta",
    "aggregate_metrics",
    "balanced_baselines",
    "compute_true_values",
    "dtr_weight",
    "empirical_bayes",
    "fit_joint_model",
    "fit_lmm",
    "initialize_theta",
    "iptw_values",
    "iptw_with_bootstrap",
    "km_rmst",
    "latent_trajectory",
    "linear_predictor",
    "lmm_marginal_loglik",
    "marginal_survival_curve",
    "mcb_best_set",
    "mcb_cutoff",
    "observed_information",
    "observed_loglik",
    "observed_score",
    "propagate_uncertainty",
    "reference_truth",
    "regimen_values",
    "response_indicator",
    "run_replication",
    "run_study",
    "simulate_subject",
    "simulate_trial",
    "weight_matrix",
    "weighted_km",
    "__version__",
]
