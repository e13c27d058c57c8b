"""Semi-structured distributional regression.

Additive predictors mix linear terms, penalized smooths, and deep
networks per distribution parameter; networks overlapping with
structured terms are orthogonalized so the structured coefficients stay
interpretable.  Models train by first-order minibatch optimization of
the penalized negative log-likelihood.
"""

__version__ = "0.1.0"

from .errors import ConfigError, DataError, FormulaError, NumericError, SddrError
from .formula import FormulaSet, ParameterFormula, canonical_format, parse_formula
from .families import (
    FamilySpec,
    FittedDistribution,
    MixtureDistribution,
    custom_family,
    make_family,
)
from .graph import Dense, Dropout, NetworkSpec
from .basis import SmoothConfig, build_smooth, df_to_lambda
from .model import (
    EnsembleModel,
    Model,
    ModelSpec,
    OrthogOptions,
    PenaltyOptions,
    RefitResult,
    build,
    ensemble,
    formula_set,
    get_ensemble_distribution,
    last_layer_refit,
)
from .training import CvResult, FitHistory, TrainConfig, cross_validate, fit, make_folds
from .bundle import load_model, save_model

__all__ = [
    "ConfigError", "DataError", "FormulaError", "NumericError", "SddrError",
    "FormulaSet", "ParameterFormula", "canonical_format", "parse_formula",
    "FamilySpec", "FittedDistribution", "MixtureDistribution",
    "custom_family", "make_family",
    "Dense", "Dropout", "NetworkSpec",
    "SmoothConfig", "build_smooth", "df_to_lambda",
    "EnsembleModel", "Model", "ModelSpec", "OrthogOptions", "PenaltyOptions",
    "RefitResult", "build", "ensemble", "formula_set",
    "get_ensemble_distribution", "last_layer_refit",
    "CvResult", "FitHistory", "TrainConfig", "cross_validate", "fit", "make_folds",
    "load_model", "save_model",
    "__version__",
]
