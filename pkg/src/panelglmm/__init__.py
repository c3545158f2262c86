"""GLMMs on balanced panels with an AR(1) time effect, fitted by penalised EM.

Two estimation routes: an L2-penalised EM with per-iteration GCV ridge
selection (low-dimensional covariates) and a supervised-component regularised
EM (high-dimensional covariates), plus a simulation harness and a CLI.
"""

from .ar1 import Ar1Params, ar1_covariance, ar1_logdet, ar1_precision, profile_ml_update
from .components import (
    ComponentSet,
    PrincipalBasis,
    fit_components,
    optimize_component,
    principal_basis,
    structural_relevance,
)
from .errors import NumericalError
from .families import Family, deviance, initial_mean, inverse_link, link, working_response
from .panel import (
    DesignMatrices,
    ModelState,
    PanelDataset,
    PanelLayout,
    build_designs,
    linear_predictor,
)
from .ridge_em import (
    FitReport,
    LinearisedModel,
    RidgeConfig,
    e_step,
    fit,
    gcv_select_lambda,
    hat_matrix,
    m_step_ar1,
    m_step_beta,
    m_step_sigma1,
    solve_henderson,
)
from .simulate import (
    SimLatents,
    SimScenario,
    StudyResult,
    Table,
    convergence_study,
    generate_panel,
    mse_study,
    rho_recovery_study,
    run_replicates,
)

__version__ = "0.1.0"

__all__ = [
    "Ar1Params",
    "ar1_covariance",
    "ar1_logdet",
    "ar1_precision",
    "profile_ml_update",
    "ComponentSet",
    "PrincipalBasis",
    "fit_components",
    "optimize_component",
    "principal_basis",
    "structural_relevance",
    "NumericalError",
    "Family",
    "deviance",
    "initial_mean",
    "inverse_link",
    "link",
    "working_response",
    "DesignMatrices",
    "ModelState",
    "PanelDataset",
    "PanelLayout",
    "build_designs",
    "linear_predictor",
    "FitReport",
    "LinearisedModel",
    "RidgeConfig",
    "e_step",
    "fit",
    "gcv_select_lambda",
    "hat_matrix",
    "m_step_ar1",
    "m_step_beta",
    "m_step_sigma1",
    "solve_henderson",
    "SimLatents",
    "SimScenario",
    "StudyResult",
    "Table",
    "convergence_study",
    "generate_panel",
    "mse_study",
    "rho_recovery_study",
    "run_replicates",
    "__version__",
]
