"""Backward-induction fitting of one policy tree per stage.

Fitting starts at the last stage, where the observed total time is the
pseudo-outcome, and walks backward: fit stage nuisances on that stage's
entrants, assemble the counterfactual-mean matrix, grow the stage tree,
then push pseudo-outcomes one stage earlier using the just-grown tree's
recommendations as the optimal future rule.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import __version__, caipw, policy_tree
from .core import DataError, Dataset, Trajectory, build_history, validate
from .nuisance.bundle import FittedStageNuisance
from .nuisance.conditional import fit_conditional_means
from .nuisance.forest import ForestParams, fit_survival_forest
from .nuisance.propensity import PositivityError, fit_propensity
from .nuisance.survival import fit_km
from .policy_tree import Hyperparams, PolicyTree

POLICY_DOC_VERSION = 1

# Feature subsets for the deliberately misspecified propensity preset:
# stage 1 sees only Age, later stages only the current Sodium measurement.
MISSPEC_COVARIATE = {1: "Age"}
MISSPEC_DEFAULT_COVARIATE = "Sodium"


class FitError(RuntimeError):
    """Fitting cannot proceed (empty stage, degenerate data, bad config)."""


@dataclass
class FitConfig:
    seed: int = 0
    tau: float | str = "auto"
    propensity_mode: str = "true"
    ridge: float = 1e-4
    propensity_clip: tuple[float, float] = (0.01, 0.99)
    s_floor: float = 0.05
    marginal_censoring: bool = False
    forest: ForestParams = field(default_factory=ForestParams)
    tree: Hyperparams | list[Hyperparams] = field(default_factory=Hyperparams)
    min_arm_fallback: int = 50

    def tree_for_stage(self, k: int) -> Hyperparams:
        if isinstance(self.tree, list):
            return self.tree[k - 1]
        return self.tree

    def validate(self, n_stages: int | None = None) -> None:
        if self.propensity_mode not in ("true", "misspecified"):
            raise FitError("propensity_mode must be 'true' or 'misspecified'")
        if self.tau != "auto" and (not isinstance(self.tau, (int, float)) or self.tau <= 0):
            raise FitError("tau must be 'auto' or positive")
        if not 0 < self.propensity_clip[0] < self.propensity_clip[1] < 1:
            raise FitError("propensity clip must satisfy 0 < lo < hi < 1")
        if not 0 <= self.s_floor < 1:
            raise FitError("s_floor must be in [0, 1)")
        if isinstance(self.tree, list) and n_stages is not None \
                and len(self.tree) != n_stages:
            raise FitError("per-stage tree hyperparameters must match K")

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "tau": self.tau,
            "propensity_mode": self.propensity_mode,
            "ridge": self.ridge,
            "propensity_clip": list(self.propensity_clip),
            "s_floor": self.s_floor,
            "marginal_censoring": self.marginal_censoring,
            "forest": self.forest.to_dict(),
            "tree": ([hp.to_dict() for hp in self.tree]
                     if isinstance(self.tree, list) else self.tree.to_dict()),
            "min_arm_fallback": self.min_arm_fallback,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "FitConfig":
        doc = dict(doc)
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise FitError(f"unknown fit config fields: {sorted(unknown)}")
        if "forest" in doc:
            doc["forest"] = ForestParams.from_dict(doc["forest"])
        if "tree" in doc:
            t = doc["tree"]
            doc["tree"] = ([Hyperparams.from_dict(d) for d in t]
                           if isinstance(t, list) else Hyperparams.from_dict(t))
        if "propensity_clip" in doc:
            doc["propensity_clip"] = tuple(doc["propensity_clip"])
        cfg = cls(**doc)
        cfg.validate()
        return cfg


def stable_seed(*parts) -> int:
    digest = hashlib.sha256(":".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "big")


@dataclass
class DTRPolicy:
    """One fitted decision tree per stage plus the layout they consume."""

    trees: list[PolicyTree]
    feature_names: list[list[str]]
    arities: list[int]
    metadata: dict

    @property
    def n_stages(self) -> int:
        return len(self.trees)

    def stage_arms(self, k: int, histories, rng=None) -> np.ndarray:
        h = np.atleast_2d(np.asarray(histories, dtype=float))
        if h.shape[1] != len(self.feature_names[k - 1]):
            raise DataError(
                f"stage {k} history has {h.shape[1]} features, "
                f"expected {len(self.feature_names[k - 1])}")
        return self.trees[k - 1].predict_batch(h)

    def to_doc(self) -> dict:
        return {
            "doc_version": POLICY_DOC_VERSION,
            "library_version": __version__,
            "trees": [policy_tree.serialize(t) for t in self.trees],
            "feature_names": self.feature_names,
            "arities": self.arities,
            "metadata": self.metadata,
        }

    @classmethod
    def from_doc(cls, doc: dict) -> "DTRPolicy":
        if not isinstance(doc, dict) or doc.get("doc_version") != POLICY_DOC_VERSION:
            raise DataError("unsupported policy document version")
        return cls(
            trees=[policy_tree.deserialize(t) for t in doc["trees"]],
            feature_names=[list(names) for names in doc["feature_names"]],
            arities=[int(m) for m in doc["arities"]],
            metadata=doc.get("metadata", {}),
        )


def recommend(policy: DTRPolicy, prefix: Trajectory, k: int) -> int:
    """Arm for stage k given the observed prefix (stages 1..k-1 plus X_k)."""
    h = build_history(prefix, k)
    if h.size != len(policy.feature_names[k - 1]):
        raise DataError(
            f"prefix yields {h.size} history features at stage {k}, "
            f"expected {len(policy.feature_names[k - 1])}")
    return policy.trees[k - 1].predict(h)


def save(policy: DTRPolicy, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(policy.to_doc(), fh, sort_keys=True, indent=1)
        fh.write("\n")


def load(path) -> DTRPolicy:
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: not a valid policy bundle: {exc}") from exc
    return DTRPolicy.from_doc(doc)


# ---- fitting ------------------------------------------------------------


def _final_event_indicator(dataset: Dataset) -> np.ndarray:
    """Event status at each subject's last entered stage."""
    out = np.zeros(dataset.n, dtype=np.int64)
    for k in range(dataset.K):
        ent = dataset.entries[k] == 1
        out[ent] = dataset.events[k][ent]
    return out


def _misspec_indices(dataset: Dataset, k: int) -> list[int]:
    names = dataset.history_names(k)
    cov = MISSPEC_COVARIATE.get(k, MISSPEC_DEFAULT_COVARIATE)
    target = f"X{k}_{cov}"
    if target not in names:
        raise FitError(
            f"misspecified propensity preset needs covariate {target!r}")
    return [names.index(target)]


def _fit_stage_nuisance(dataset: Dataset, k: int, h: np.ndarray,
                        ids: np.ndarray, pseudo_values: np.ndarray,
                        delta_final: np.ndarray, tau: float,
                        config: FitConfig) -> FittedStageNuisance:
    arms = dataset.treatments[k - 1][ids]
    n_arms = dataset.M[k - 1]
    feature_indices = (None if config.propensity_mode == "true"
                       else _misspec_indices(dataset, k))
    prop = fit_propensity(h, arms, n_arms, ridge=config.ridge,
                          feature_indices=feature_indices,
                          clip=config.propensity_clip)

    total = dataset.total_time[ids]
    censored = 1 - delta_final[ids]
    if config.marginal_censoring:
        censor_model = fit_km(total, censored)
    else:
        censor_model = fit_survival_forest(
            h, total, censored, config.forest,
            seed=stable_seed(config.seed, "censor", k), orientation="event")

    is_final = k == dataset.K
    if is_final:
        cond = fit_conditional_means(
            h, arms, total, dataset.events[k - 1][ids], n_arms, tau,
            config.forest, seed=stable_seed(config.seed, "mu", k),
            kind="survival", min_arm=config.min_arm_fallback)
    else:
        defined = ~np.isnan(pseudo_values)
        if defined.sum() < 2 * config.forest.leaf_min:
            raise FitError(
                f"stage {k}: only {int(defined.sum())} subjects carry a "
                "defined pseudo-outcome; cannot fit conditional means")
        cond = fit_conditional_means(
            h[defined], arms[defined], pseudo_values[defined], None, n_arms,
            tau, config.forest, seed=stable_seed(config.seed, "mu", k),
            kind="regression", min_arm=config.min_arm_fallback)
    return FittedStageNuisance(propensity=prop, censor=censor_model,
                               cond=cond, tau=tau)


def fit(dataset: Dataset, config: FitConfig, nuisance_override=None) -> DTRPolicy:
    """Fit the full regime by backward induction.

    `nuisance_override`, when given, maps a stage index to a bundle with the
    nuisance surface (used to inject ground-truth nuisances in experiments);
    fitted nuisances are used otherwise. Deterministic given (dataset,
    config): every forest seed derives from config.seed.

    Raises PositivityError when a stage lacks an observed arm, FitError on
    empty or degenerate stages.
    """
    config.validate(dataset.K)
    problems = validate(dataset)
    if problems:
        raise DataError(f"dataset invalid: {problems[0]}")

    if config.tau == "auto":
        tau = float(np.quantile(dataset.total_time, 0.9))
    else:
        tau = float(config.tau)
    delta_final = _final_event_indicator(dataset)

    trees: list[PolicyTree | None] = [None] * dataset.K
    stage_info: list[dict] = [{} for _ in range(dataset.K)]
    trace: list[tuple[str, int]] = []
    audit_failures: list[str] = []
    r_bar = np.full(dataset.n, np.nan)

    for k in range(dataset.K, 0, -1):
        ids = dataset.stage_entrant_ids(k)
        if ids.size == 0:
            raise FitError(f"stage {k}: no entrants")
        arms = dataset.treatments[k - 1][ids]
        counts = np.bincount(arms, minlength=dataset.M[k - 1])
        if np.any(counts == 0):
            missing = [int(a) for a in np.flatnonzero(counts == 0)]
            raise PositivityError(
                f"positivity violated in sample: stage {k} arm(s) {missing} "
                "never observed")

        h = dataset.history_matrix(k, ids)
        if k == dataset.K:
            pseudo_values = dataset.total_time[ids].copy()
        else:
            pseudo_values = r_bar[ids].copy()

        if nuisance_override is not None:
            bundle = (nuisance_override(k) if callable(nuisance_override)
                      else nuisance_override[k])
        else:
            bundle = _fit_stage_nuisance(dataset, k, h, ids, pseudo_values,
                                         delta_final, tau, config)
        trace.append(("nuisance", k))

        pseudo = caipw.PseudoOutcomes(stage=k, subject_ids=ids, values=pseudo_values)
        matrix = caipw.caipw_matrix(dataset, k, bundle, pseudo,
                                    s_floor=config.s_floor)
        trace.append(("matrix", k))

        hp = config.tree_for_stage(k)
        tree = policy_tree.grow(np.arange(ids.size), h, matrix, hp)
        trace.append(("tree", k))
        trees[k - 1] = tree
        audit = policy_tree.audit_tree(tree, h, matrix, hp)
        audit_failures.extend(f"stage {k}: {msg}" for msg in audit)

        stage_info[k - 1] = {
            "n_entrants": int(ids.size),
            "arm_counts": [int(c) for c in counts],
            "tree_depth": tree.depth,
            "tree_leaves": len(tree.leaves()),
            "effective_lambda": tree.effective_lambda,
            "caipw_column_means": [float(v) for v in matrix.values.mean(axis=0)],
            "audit_violations": audit,
        }

        if k > 1:
            delta_k = dataset.events[k - 1][ids]
            g_opt = tree.predict_batch(h)
            mus = bundle.cond_means(h)
            rows = np.arange(ids.size)
            carried = np.where(
                delta_k == 1,
                pseudo_values + mus[rows, g_opt] - mus[rows, arms],
                mus[rows, g_opt])
            r_bar = np.full(dataset.n, np.nan)
            r_bar[ids] = np.maximum(carried, 0.0)
            # Subjects who finished with an observed event before stage k
            # carry their fully observed remaining survival.
            prev_ent = dataset.entries[k - 2] == 1
            ended = prev_ent & (dataset.entries[k - 1] == 0) \
                & (dataset.events[k - 2] == 1)
            r_bar[ended] = dataset.total_time[ended]
            trace.append(("pseudo", k - 1))

    metadata = {
        "fit_config": config.to_dict(),
        "tau": tau,
        "library_version": __version__,
        "stages": stage_info,
        "trace": [list(t) for t in trace],
        "audit_failures": audit_failures,
        "n_train": dataset.n,
    }
    return DTRPolicy(
        trees=[t for t in trees if t is not None],
        feature_names=[dataset.history_names(k) for k in range(1, dataset.K + 1)],
        arities=list(dataset.M),
        metadata=metadata,
    )


# ---- hyperparameter grid search ------------------------------------------


def grid_search(dataset: Dataset, grid: list[FitConfig],
                validation_fraction: float = 0.5, seed: int = 0):
    """Fit each config on a seeded train split, score by validation RMST.

    Scoring uses the observational concordant-subgroup estimator at a single
    evaluation horizon (the validation 0.9-quantile of observed time), so
    scores are comparable across configs. Per-config failures are recorded
    in the report, not raised. Ties keep the earliest grid entry.
    """
    from .evaluation import observational_value

    if not grid:
        raise FitError("empty grid")
    if not 0 < validation_fraction < 1:
        raise FitError("validation_fraction must be in (0, 1)")
    rng = np.random.default_rng(stable_seed(seed, "gridsearch"))
    perm = rng.permutation(dataset.n)
    n_val = max(1, int(round(dataset.n * validation_fraction)))
    if n_val >= dataset.n:
        raise FitError("validation split leaves no training data")
    val_ids, train_ids = perm[:n_val], perm[n_val:]
    train_ds = dataset.subset(np.sort(train_ids))
    val_ds = dataset.subset(np.sort(val_ids))
    tau_eval = float(np.quantile(val_ds.total_time, 0.9))

    report = []
    best_idx, best_score = None, -np.inf
    for i, config in enumerate(grid):
        row: dict = {"index": i, "config": config.to_dict(), "tau_eval": tau_eval}
        try:
            policy = fit(train_ds, config)
            score = observational_value(policy, val_ds, tau_eval)
            row.update(score=score["rmst"], stderr=score["stderr"],
                       concordant_fraction=score["concordant_fraction"],
                       n_concordant=score["n_concordant"],
                       warning=score["warning"])
            if score["rmst"] is not None and score["rmst"] > best_score:
                best_idx, best_score = i, score["rmst"]
        except Exception as exc:  # recorded, not fatal
            row.update(score=None, error=f"{type(exc).__name__}: {exc}")
        report.append(row)
    if best_idx is None:
        raise FitError("no grid configuration produced a scorable policy")
    return grid[best_idx], {"best_index": best_idx, "rows": report}
