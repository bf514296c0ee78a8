"""Functional least angle regression with mixed scalar/functional
covariates, Gaussian-process random effects and a simulation harness."""

from .cca import CcaResult, PenaltyConfig, VariableGroup, cca_scalar_group
from .estimators import FunctionalLarsRegressor, GpMixedRegressor
from .errors import (
    DataFormatError,
    DegenerateResponseError,
    FlarsError,
    IllPosedError,
    NoSignalError,
    OptimizationFailedError,
    SingularMatrixError,
)
from .gp import (
    GpModel,
    Kernel,
    MixedFit,
    backfit,
    fit_g,
    fit_hyperparameters,
    kernel_matrix,
    predict_new_subject,
    predict_within_subject,
)
from .lars import (
    CandidateSet,
    FittedModel,
    FlarsOptions,
    NormalizationRule,
    SelectionState,
    StoppingDiagnostics,
    run_flars,
    stopping_cd,
)
from .representation import (
    FunctionalSample,
    Representation,
    TimeGrid,
    build_representation,
    gauss_legendre_rule,
    project,
    roughness,
)
from .simulate import (
    AggregateReport,
    ReplicationReport,
    ScenarioConfig,
    generate_scenario,
    run_replications,
    selection_metrics,
)

__version__ = "0.1.0"

__all__ = [
    "AggregateReport",
    "CandidateSet",
    "CcaResult",
    "DataFormatError",
    "DegenerateResponseError",
    "FittedModel",
    "FlarsError",
    "FlarsOptions",
    "FunctionalLarsRegressor",
    "FunctionalSample",
    "GpMixedRegressor",
    "GpModel",
    "IllPosedError",
    "Kernel",
    "MixedFit",
    "NoSignalError",
    "NormalizationRule",
    "OptimizationFailedError",
    "PenaltyConfig",
    "ReplicationReport",
    "Representation",
    "ScenarioConfig",
    "SelectionState",
    "SingularMatrixError",
    "StoppingDiagnostics",
    "TimeGrid",
    "VariableGroup",
    "backfit",
    "build_representation",
    "cca_scalar_group",
    "fit_g",
    "fit_hyperparameters",
    "gauss_legendre_rule",
    "generate_scenario",
    "kernel_matrix",
    "predict_new_subject",
    "predict_within_subject",
    "project",
    "roughness",
    "run_flars",
    "run_replications",
    "selection_metrics",
    "stopping_cd",
]
