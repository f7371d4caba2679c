"""Doubly robust estimation of arm-specific means with outcomes missing at random.

Implements AIPW, TMLE, and their drift-corrected variants (DAIPW, DTMLE)
with influence-function-based Wald confidence intervals, the supporting
learners (logistic regression, penalized interactions, stacking), kernel
regression with cross-validated undersmoothed bandwidths, and a Monte Carlo
study harness.
"""

__version__ = "0.1.0"

from .data_model import (
    DataError,
    Dataset,
    ObservationRecord,
    OutcomeBounds,
    UNIT_BOUNDS,
    back_transform,
    bound_outcomes,
    load_csv,
    write_csv,
)
from .estimators import (
    EstimateResult,
    FluctuationState,
    NuisanceFit,
    NuisanceValues,
    TiltingCovariates,
    contrast,
    eif,
    estimate_aipw,
    estimate_daipw,
    estimate_drift,
    estimate_dtmle,
    estimate_tmle,
    estimate_unadjusted,
    stopping_tolerance,
    zero_lambda_fit,
)
from .learners import (
    DesignSpec,
    FittedLearner,
    expand_design,
    fit_logistic_irls,
    fit_logistic_lasso,
    fit_stacking,
    irls_solve,
)
from .simulation import (
    DgpConfig,
    Scenario,
    SCENARIOS,
    ScenarioReport,
    efficiency_bound,
    generate,
    run_study,
    true_theta,
)
from .smoothing import (
    KernelSmoother,
    LambdaFit,
    SmoothingConfig,
    fit_kernel,
    fit_lambda,
)

__all__ = [
    "__version__",
    "DataError",
    "Dataset",
    "ObservationRecord",
    "OutcomeBounds",
    "UNIT_BOUNDS",
    "back_transform",
    "bound_outcomes",
    "load_csv",
    "write_csv",
    "EstimateResult",
    "FluctuationState",
    "NuisanceFit",
    "NuisanceValues",
    "TiltingCovariates",
    "contrast",
    "eif",
    "estimate_aipw",
    "estimate_daipw",
    "estimate_drift",
    "estimate_dtmle",
    "estimate_tmle",
    "estimate_unadjusted",
    "stopping_tolerance",
    "zero_lambda_fit",
    "DesignSpec",
    "FittedLearner",
    "expand_design",
    "fit_logistic_irls",
    "fit_logistic_lasso",
    "fit_stacking",
    "irls_solve",
    "DgpConfig",
    "Scenario",
    "SCENARIOS",
    "ScenarioReport",
    "efficiency_bound",
    "generate",
    "run_study",
    "true_theta",
    "KernelSmoother",
    "LambdaFit",
    "SmoothingConfig",
    "fit_kernel",
    "fit_lambda",
]
