"""Per-stage nuisance bundle consumed by the counterfactual-mean estimators.

Any object with this surface can back the estimators (the tests inject
ground-truth bundles the same way):

    propensities(H)        -> (n, M) clipped assignment probabilities
    censor_survival(H, t)  -> (n,) censoring survival at per-row times
    cond_means(H)          -> (n, M) restricted conditional mean outcomes
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .conditional import ConditionalMeanModel
from .forest import SurvivalForest
from .propensity import PropensityModel, predict_propensity
from .survival import SurvivalCurve


@dataclass
class FittedStageNuisance:
    propensity: PropensityModel
    censor: SurvivalForest | SurvivalCurve
    cond: ConditionalMeanModel
    tau: float

    def propensities(self, h) -> np.ndarray:
        return predict_propensity(self.propensity, h)

    def censor_survival(self, h, t) -> np.ndarray:
        h = np.atleast_2d(np.asarray(h, dtype=float))
        t = np.broadcast_to(np.asarray(t, dtype=float), (h.shape[0],))
        if isinstance(self.censor, SurvivalCurve):
            return self.censor.at(t)
        return self.censor.predict_survival(h, t)

    def cond_means(self, h) -> np.ndarray:
        return self.cond.mean_matrix(h)


# Shared reference for duck-typed bundles (fitted or injected ground truth).
StageNuisance = FittedStageNuisance
