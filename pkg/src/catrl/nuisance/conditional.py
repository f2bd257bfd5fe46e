"""Per-arm conditional mean outcome models.

Final-stage means are tau-restricted means of per-arm survival forests;
intermediate-stage means regress the (real-valued) pseudo-outcome with
per-arm regression forests. Arms with thin subsamples fall back to a single
forest with the treatment index appended as a feature.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .forest import (ForestParams, RegressionForest, SurvivalForest,
                     fit_regression_forest, fit_survival_forest)


@dataclass
class ConditionalMeanModel:
    kind: str                 # "survival" | "regression"
    n_arms: int
    tau: float
    single: bool
    models: list              # per-arm forests, or [one forest] when single

    def mean_for_arm(self, h, a: int, tau: float | None = None) -> np.ndarray:
        """mu_hat(h, a), clamped to [0, tau]."""
        tau = self.tau if tau is None else tau
        h = np.atleast_2d(np.asarray(h, dtype=float))
        if self.single:
            aug = np.column_stack([h, np.full(h.shape[0], float(a))])
            forest = self.models[0]
            if self.kind == "survival":
                out = forest.restricted_mean(aug, tau)
            else:
                out = forest.predict(aug)
        else:
            forest = self.models[a]
            if self.kind == "survival":
                out = forest.restricted_mean(h, tau)
            else:
                out = forest.predict(h)
        return np.clip(out, 0.0, tau)

    def mean_matrix(self, h) -> np.ndarray:
        h = np.atleast_2d(np.asarray(h, dtype=float))
        out = np.empty((h.shape[0], self.n_arms))
        for a in range(self.n_arms):
            out[:, a] = self.mean_for_arm(h, a)
        return out


def conditional_mean(model: ConditionalMeanModel, h, a: int, tau: float) -> float:
    """Restricted conditional mean for one history row; in [0, tau] always."""
    if not 0 <= a < model.n_arms:
        raise ValueError(f"arm {a} out of range")
    if tau < 0:
        raise ValueError("tau must be non-negative")
    if tau == 0:
        return 0.0
    return float(model.mean_for_arm(np.atleast_2d(h), a, tau)[0])


def fit_conditional_means(features, arms, outcomes, events, n_arms: int,
                          tau: float, params: ForestParams, seed,
                          kind: str = "survival", min_arm: int = 50) -> ConditionalMeanModel:
    """Fit per-arm forests; fall back to a pooled treatment-feature forest
    when the smallest arm subsample is below `min_arm`."""
    x = np.atleast_2d(np.asarray(features, dtype=float))
    arms_arr = np.asarray(arms, dtype=np.int64)
    y = np.asarray(outcomes, dtype=float)
    if kind not in ("survival", "regression"):
        raise ValueError("kind must be 'survival' or 'regression'")
    counts = np.bincount(arms_arr, minlength=n_arms)
    single = bool(counts.min() < min_arm)

    def fit_one(xs, ys, evs, tag):
        if kind == "survival":
            return fit_survival_forest(xs, ys, evs, params,
                                       seed_sequence_tag(seed, tag), "event")
        return fit_regression_forest(xs, ys, params, seed_sequence_tag(seed, tag))

    if single:
        aug = np.column_stack([x, arms_arr.astype(float)])
        ev = None if events is None else np.asarray(events, dtype=np.int64)
        models = [fit_one(aug, y, ev, "pooled")]
    else:
        models = []
        ev = None if events is None else np.asarray(events, dtype=np.int64)
        for a in range(n_arms):
            sel = arms_arr == a
            models.append(fit_one(x[sel], y[sel],
                                  None if ev is None else ev[sel], f"arm{a}"))
    return ConditionalMeanModel(kind=kind, n_arms=n_arms, tau=tau,
                                single=single, models=models)


def seed_sequence_tag(seed, tag: str):
    """Stable per-arm seed material (kept trivial so docs serialize cleanly)."""
    return (seed, tag)
