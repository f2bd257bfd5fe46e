"""Nuisance estimation: propensities, censoring survival, conditional means."""

from .survival import SurvivalCurve, fit_km, step_restricted_mean
from .propensity import PropensityModel, fit_propensity, predict_propensity, PositivityError
from .forest import ForestParams, SurvivalForest, RegressionForest, fit_survival_forest, fit_regression_forest, oob_concordance
from .conditional import ConditionalMeanModel, fit_conditional_means, conditional_mean
from .bundle import StageNuisance, FittedStageNuisance

__all__ = [
    "SurvivalCurve", "fit_km", "step_restricted_mean",
    "PropensityModel", "fit_propensity", "predict_propensity", "PositivityError",
    "ForestParams", "SurvivalForest", "RegressionForest",
    "fit_survival_forest", "fit_regression_forest", "oob_concordance",
    "ConditionalMeanModel", "fit_conditional_means", "conditional_mean",
    "StageNuisance", "FittedStageNuisance",
]
