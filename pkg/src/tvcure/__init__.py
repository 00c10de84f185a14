"""Promotion-time cure survival models with exogenous time-varying
covariates, double additive predictors and Laplace-based penalty selection."""

from .data import (
    DataError,
    DesignViews,
    ModelSpec,
    PersonPeriodTable,
    SurvivalRecord,
    build_bases,
    build_design,
    expand,
    ingest_csv,
)
from .estimation import (
    ConvergenceError,
    FitConfig,
    FitResult,
    credible_bands,
    fit,
    fit_statistics,
    stationarity_residuals,
)
from .model import (
    BaselineState,
    LikelihoodData,
    NumericalError,
    PenaltyState,
    RegressionState,
    baseline,
    hazard,
    loglik,
    penalized_loglik,
    survival_path,
)
from .predict import predict_path
from .simulate import (
    ReplicationSummary,
    SimScenario,
    generate,
    identifiability_centering,
    replicate,
    simulate_units,
)
from .splines import (
    CenteredBasis,
    PenaltyMatrix,
    SplineBasis,
    build_basis,
    build_penalty,
    recenter,
)

__version__ = "0.1.0"
