"""Censoring-adjusted doubly robust counterfactual mean estimates.

The per-subject, per-arm estimate at the final stage is

    I(A = a) * delta / (pi_hat * S_c_hat(T | H)) * T
        + (1 - I(A = a) / pi_hat) * mu_hat(H, a)

with the observed total time T as the outcome. Intermediate stages use the
same shape with the recursively built pseudo-outcome in place of T and the
censoring survival evaluated at that pseudo-outcome. The estimator stays
consistent when either the propensity model or the conditional mean model
is correct (double robustness); censored subjects enter only through the
augmentation term because of the delta factor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import DataError, Dataset

DEFAULT_S_FLOOR = 0.05


@dataclass
class StageView:
    """One subject's slice at one stage: history row plus observed fields."""

    history: np.ndarray
    treatment: int
    event: int
    outcome: float          # T at the final stage, pseudo-outcome earlier


@dataclass
class PseudoOutcomes:
    stage: int
    subject_ids: np.ndarray
    values: np.ndarray      # NaN where undefined (censored at this stage)


@dataclass
class CaipwMatrix:
    """n_entrants x M matrix of counterfactual mean estimates for one stage."""

    stage: int
    subject_ids: np.ndarray
    values: np.ndarray

    @property
    def n_arms(self) -> int:
        return self.values.shape[1]


def _estimate(ind: float, event: int, pi: float, s_c: float,
              outcome: float, mu: float) -> float:
    first = outcome / (pi * s_c) if (ind and event == 1) else 0.0
    return first + (1.0 - ind / pi) * mu


def caipw_final(record: StageView, models, a: int,
                s_floor: float = DEFAULT_S_FLOOR) -> float:
    """Final-stage estimate for arm `a`; may be negative (augmentation can
    dominate). Denominators are guarded by the propensity clip and the
    censoring-survival floor."""
    h = np.atleast_2d(record.history)
    pi = float(models.propensities(h)[0, a])
    mu = float(models.cond_means(h)[0, a])
    ind = float(record.treatment == a)
    s_c = max(float(models.censor_survival(h, record.outcome)[0]), s_floor)
    return _estimate(ind, record.event, pi, s_c, record.outcome, mu)


def caipw_intermediate(record: StageView, models, a: int, r_bar_k: float,
                       s_floor: float = DEFAULT_S_FLOOR) -> float:
    """Intermediate-stage estimate with the censoring survival evaluated at
    the stage-k pseudo-outcome."""
    h = np.atleast_2d(record.history)
    pi = float(models.propensities(h)[0, a])
    mu = float(models.cond_means(h)[0, a])
    ind = float(record.treatment == a)
    s_c = max(float(models.censor_survival(h, r_bar_k)[0]), s_floor)
    return _estimate(ind, record.event, pi, s_c, r_bar_k, mu)


def pseudo_outcome(record: StageView, next_stage_models, g_next_opt: int,
                   r_bar_next: float) -> float:
    """Back-propagate the stage-(k+1) outcome to stage k.

    Uncensored subjects keep their realised outcome plus the modeled loss
    from any suboptimal observed treatment; censored subjects are imputed
    with the modeled outcome under the optimal arm. Clamped at 0: negative
    survival pseudo-outcomes are model-error artifacts.
    """
    h = np.atleast_2d(record.history)
    mus = next_stage_models.cond_means(h)[0]
    if record.event == 1:
        val = r_bar_next + mus[g_next_opt] - mus[record.treatment]
    else:
        val = mus[g_next_opt]
    return float(max(val, 0.0))


def caipw_matrix(dataset: Dataset, stage: int, models, pseudo: PseudoOutcomes,
                 s_floor: float = DEFAULT_S_FLOOR) -> CaipwMatrix:
    """Assemble the per-subject, per-arm matrix for one stage.

    `pseudo` must align with the stage's entrants; at the final stage its
    values are the observed total times. Column means estimate the mean
    counterfactual outcome under a uniform arm assignment.
    """
    ids = dataset.stage_entrant_ids(stage)
    if pseudo.stage != stage or not np.array_equal(pseudo.subject_ids, ids):
        raise DataError("pseudo-outcomes misaligned with stage entrants")
    n_arms = dataset.M[stage - 1]
    h = dataset.history_matrix(stage, ids)
    arms = dataset.treatments[stage - 1][ids]
    delta = dataset.events[stage - 1][ids]
    y = np.asarray(pseudo.values, dtype=float)

    probs = models.propensities(h)
    mus = models.cond_means(h)
    y_safe = np.where(np.isnan(y), 0.0, y)
    s_c = np.maximum(models.censor_survival(h, y_safe), s_floor)

    values = np.empty((ids.size, n_arms))
    for a in range(n_arms):
        ind = (arms == a).astype(float)
        first = np.where((delta == 1) & (arms == a),
                         y_safe / (probs[:, a] * s_c), 0.0)
        values[:, a] = first + (1.0 - ind / probs[:, a]) * mus[:, a]
    if not np.all(np.isfinite(values)):
        raise DataError("non-finite counterfactual mean estimate")
    return CaipwMatrix(stage=stage, subject_ids=ids, values=values)
