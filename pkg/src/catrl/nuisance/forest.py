"""Random survival forests and regression forests grown from scratch.

Survival trees split on the standardized log-rank statistic over a random
feature subset and store Nelson-Aalen cumulative hazards in their leaves.
Regression trees (used for pseudo-outcome conditional means) split on
variance reduction and store leaf means. Both are deterministic given a
seed: per-tree RNG streams are spawned from one SeedSequence, so trees can
be grown in any order with identical results.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..rng import seed_sequence
from .survival import step_restricted_mean


@dataclass
class ForestParams:
    n_trees: int = 200
    leaf_min: int = 15
    mtry: int | None = None          # None -> ceil(sqrt(p))
    max_depth: int | None = None
    n_thresholds: int = 8            # candidate quantile thresholds per feature

    def resolve_mtry(self, p: int) -> int:
        if self.mtry is not None:
            return max(1, min(self.mtry, p))
        return max(1, int(np.ceil(np.sqrt(p))))

    def to_dict(self) -> dict:
        return {"n_trees": self.n_trees, "leaf_min": self.leaf_min,
                "mtry": self.mtry, "max_depth": self.max_depth,
                "n_thresholds": self.n_thresholds}

    @classmethod
    def from_dict(cls, doc: dict) -> "ForestParams":
        return cls(**doc)


def _candidate_thresholds(values: np.ndarray, n_thresholds: int) -> np.ndarray:
    u = np.unique(values)
    if u.size < 2:
        return np.empty(0)
    if u.size - 1 <= n_thresholds:
        return (u[:-1] + u[1:]) / 2.0
    qs = np.quantile(values, np.arange(1, n_thresholds + 1) / (n_thresholds + 1))
    return np.unique(qs)


def _risk_groups(ts: np.ndarray, ev: np.ndarray):
    """Per-unique-time event and at-risk totals for a time-sorted node."""
    starts = np.flatnonzero(np.concatenate([[True], ts[1:] != ts[:-1]]))
    d_all = np.add.reduceat(ev, starts)
    n_all = (ts.size - starts).astype(float)
    return starts, d_all, n_all


def _logrank_scores(masks: np.ndarray, ev: np.ndarray, starts, d_all, n_all) -> np.ndarray:
    """Standardized log-rank statistic for each left-membership mask.

    masks is (c, m) boolean in time-sorted order. Ties share the at-risk set
    of their common time.
    """
    maskf = masks.astype(float)
    d_left = np.add.reduceat(maskf * ev, starts, axis=1)
    suffix = np.cumsum(maskf[:, ::-1], axis=1)[:, ::-1]
    n_left = suffix[:, starts]
    frac = n_left / n_all
    num = (d_left - frac * d_all).sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        per_time = d_all * frac * (1.0 - frac) * (n_all - d_all) / (n_all - 1.0)
    per_time = np.where(n_all > 1.0, per_time, 0.0)
    var = per_time.sum(axis=1)
    return np.where(var > 0, np.abs(num) / np.sqrt(np.maximum(var, 1e-300)), 0.0)


def _na_leaf(ts: np.ndarray, ev: np.ndarray) -> dict:
    """Nelson-Aalen cumulative hazard at the node's event times."""
    starts, d_all, n_all = _risk_groups(ts, ev)
    keep = d_all > 0
    times = ts[starts][keep]
    cumhaz = np.cumsum(d_all[keep] / n_all[keep])
    return {"leaf": True, "times": times, "cumhaz": cumhaz, "count": int(ts.size)}


def _grow_survival_tree(x, times, events, params: ForestParams,
                        rng: np.random.Generator, depth: int = 0) -> dict:
    m, p = x.shape
    order = np.argsort(times, kind="stable")
    ts, ev = times[order], events[order].astype(float)
    if (m < 2 * params.leaf_min
            or (params.max_depth is not None and depth >= params.max_depth)
            or ts[0] == ts[-1]):
        return _na_leaf(ts, ev)

    starts, d_all, n_all = _risk_groups(ts, ev)
    feats = np.sort(rng.choice(p, size=params.resolve_mtry(p), replace=False))
    best = None
    for f in feats:
        v = x[:, f]
        cands = _candidate_thresholds(v, params.n_thresholds)
        if cands.size == 0:
            continue
        vs = v[order]
        masks = vs[None, :] <= cands[:, None]
        sizes = masks.sum(axis=1)
        valid = (sizes >= params.leaf_min) & (m - sizes >= params.leaf_min)
        if not np.any(valid):
            continue
        scores = _logrank_scores(masks[valid], ev, starts, d_all, n_all)
        j = int(np.argmax(scores))
        if scores[j] > 0 and (best is None or scores[j] > best[0]):
            best = (float(scores[j]), int(f), float(cands[valid][j]))
    if best is None:
        return _na_leaf(ts, ev)

    _, f, thr = best
    mask = x[:, f] <= thr
    return {
        "leaf": False, "feature": f, "threshold": thr,
        "left": _grow_survival_tree(x[mask], times[mask], events[mask],
                                    params, rng, depth + 1),
        "right": _grow_survival_tree(x[~mask], times[~mask], events[~mask],
                                     params, rng, depth + 1),
    }


def _route_leaves(node: dict, x: np.ndarray, rows: np.ndarray, out: list) -> None:
    if node["leaf"]:
        out.append((node, rows))
        return
    mask = x[rows, node["feature"]] <= node["threshold"]
    _route_leaves(node["left"], x, rows[mask], out)
    _route_leaves(node["right"], x, rows[~mask], out)


class SurvivalForest:
    """Bootstrap ensemble of log-rank survival trees with Nelson-Aalen leaves."""

    def __init__(self, trees, params: ForestParams, n_features: int,
                 orientation: str, seed, bootstrap_indices=None):
        self.trees = trees
        self.params = params
        self.n_features = n_features
        self.orientation = orientation
        self.seed = seed
        self.bootstrap_indices = bootstrap_indices

    def predict_survival(self, h, t) -> np.ndarray:
        """Ensemble survival mean exp(-H_leaf(t)) at per-row times t.

        Monotone non-increasing in t; last hazard value carried forward
        beyond each leaf's support.
        """
        x = np.atleast_2d(np.asarray(h, dtype=float))
        t = np.broadcast_to(np.asarray(t, dtype=float), (x.shape[0],))
        total = np.zeros(x.shape[0])
        rows = np.arange(x.shape[0])
        for tree in self.trees:
            groups: list = []
            _route_leaves(tree, x, rows, groups)
            for leaf, idx in groups:
                pos = np.searchsorted(leaf["times"], t[idx], side="right")
                haz = np.concatenate([[0.0], leaf["cumhaz"]])[pos]
                total[idx] += np.exp(-haz)
        return total / len(self.trees)

    def restricted_mean(self, h, tau: float) -> np.ndarray:
        """Exact integral of the ensemble survival step function on [0, tau].

        By linearity this is the mean of per-leaf restricted means.
        """
        x = np.atleast_2d(np.asarray(h, dtype=float))
        total = np.zeros(x.shape[0])
        rows = np.arange(x.shape[0])
        for tree in self.trees:
            groups: list = []
            _route_leaves(tree, x, rows, groups)
            for leaf, idx in groups:
                rmst = step_restricted_mean(leaf["times"],
                                            np.exp(-leaf["cumhaz"]), tau)
                total[idx] += rmst
        return total / len(self.trees)

    def to_doc(self) -> dict:
        def node_doc(node):
            if node["leaf"]:
                return {"leaf": True, "count": node["count"],
                        "times": [float(v) for v in node["times"]],
                        "cumhaz": [float(v) for v in node["cumhaz"]]}
            return {"leaf": False, "feature": int(node["feature"]),
                    "threshold": float(node["threshold"]),
                    "left": node_doc(node["left"]),
                    "right": node_doc(node["right"])}
        return {"doc_version": 1, "kind": "survival_forest",
                "orientation": self.orientation, "n_features": self.n_features,
                "params": self.params.to_dict(),
                "trees": [node_doc(t) for t in self.trees]}

    @classmethod
    def from_doc(cls, doc: dict) -> "SurvivalForest":
        if doc.get("doc_version") != 1 or doc.get("kind") != "survival_forest":
            raise ValueError("unsupported survival forest document")

        def parse(node):
            if node["leaf"]:
                return {"leaf": True, "count": node["count"],
                        "times": np.asarray(node["times"], dtype=float),
                        "cumhaz": np.asarray(node["cumhaz"], dtype=float)}
            return {"leaf": False, "feature": node["feature"],
                    "threshold": node["threshold"],
                    "left": parse(node["left"]), "right": parse(node["right"])}
        return cls(trees=[parse(t) for t in doc["trees"]],
                   params=ForestParams.from_dict(doc["params"]),
                   n_features=int(doc["n_features"]),
                   orientation=doc["orientation"], seed=None)


def fit_survival_forest(features, times, events, params: ForestParams,
                        seed, orientation: str = "event") -> SurvivalForest:
    """Grow a bootstrap survival forest.

    orientation="censoring" flips the event indicators (1 - delta) so that
    censoring becomes the modeled event. Degenerate inputs (identical rows)
    yield single-leaf trees rather than an error.
    """
    x = np.atleast_2d(np.asarray(features, dtype=float))
    times = np.asarray(times, dtype=float)
    events = np.asarray(events, dtype=np.int64)
    if orientation == "censoring":
        events = 1 - events
    elif orientation != "event":
        raise ValueError("orientation must be 'event' or 'censoring'")
    n = times.size
    if n < 2 * params.leaf_min:
        raise ValueError(f"need at least {2 * params.leaf_min} subjects")

    trees, boots = [], []
    for child in seed_sequence(seed, "survival", orientation).spawn(params.n_trees):
        rng = np.random.default_rng(child)
        idx = rng.integers(0, n, n)
        boots.append(idx)
        trees.append(_grow_survival_tree(x[idx], times[idx], events[idx],
                                         params, rng))
    return SurvivalForest(trees, params, x.shape[1], orientation, seed,
                          bootstrap_indices=boots)


# ---- regression forest ------------------------------------------------------


def _mean_leaf(y: np.ndarray) -> dict:
    return {"leaf": True, "mean": float(y.mean()), "count": int(y.size)}


def _grow_regression_tree(x, y, params: ForestParams,
                          rng: np.random.Generator, depth: int = 0) -> dict:
    m, p = x.shape
    if (m < 2 * params.leaf_min
            or (params.max_depth is not None and depth >= params.max_depth)
            or np.all(y == y[0])):
        return _mean_leaf(y)

    total = y.sum()
    base = total * total / m
    feats = np.sort(rng.choice(p, size=params.resolve_mtry(p), replace=False))
    best = None
    for f in feats:
        v = x[:, f]
        cands = _candidate_thresholds(v, params.n_thresholds)
        if cands.size == 0:
            continue
        masks = v[None, :] <= cands[:, None]
        sizes = masks.sum(axis=1)
        valid = (sizes >= params.leaf_min) & (m - sizes >= params.leaf_min)
        if not np.any(valid):
            continue
        left_sum = masks[valid].astype(float) @ y
        n_l = sizes[valid].astype(float)
        n_r = m - n_l
        gain = left_sum ** 2 / n_l + (total - left_sum) ** 2 / n_r - base
        j = int(np.argmax(gain))
        if gain[j] > 0 and (best is None or gain[j] > best[0]):
            best = (float(gain[j]), int(f), float(cands[valid][j]))
    if best is None:
        return _mean_leaf(y)

    _, f, thr = best
    mask = x[:, f] <= thr
    return {
        "leaf": False, "feature": f, "threshold": thr,
        "left": _grow_regression_tree(x[mask], y[mask], params, rng, depth + 1),
        "right": _grow_regression_tree(x[~mask], y[~mask], params, rng, depth + 1),
    }


class RegressionForest:
    """Bootstrap ensemble of variance-reduction trees with mean leaves."""

    def __init__(self, trees, params: ForestParams, n_features: int, seed,
                 bootstrap_indices=None):
        self.trees = trees
        self.params = params
        self.n_features = n_features
        self.seed = seed
        self.bootstrap_indices = bootstrap_indices

    def predict(self, h) -> np.ndarray:
        x = np.atleast_2d(np.asarray(h, dtype=float))
        total = np.zeros(x.shape[0])
        rows = np.arange(x.shape[0])
        for tree in self.trees:
            groups: list = []
            _route_leaves(tree, x, rows, groups)
            for leaf, idx in groups:
                total[idx] += leaf["mean"]
        return total / len(self.trees)

    def to_doc(self) -> dict:
        def node_doc(node):
            if node["leaf"]:
                return {"leaf": True, "mean": node["mean"], "count": node["count"]}
            return {"leaf": False, "feature": int(node["feature"]),
                    "threshold": float(node["threshold"]),
                    "left": node_doc(node["left"]),
                    "right": node_doc(node["right"])}
        return {"doc_version": 1, "kind": "regression_forest",
                "n_features": self.n_features, "params": self.params.to_dict(),
                "trees": [node_doc(t) for t in self.trees]}

    @classmethod
    def from_doc(cls, doc: dict) -> "RegressionForest":
        if doc.get("doc_version") != 1 or doc.get("kind") != "regression_forest":
            raise ValueError("unsupported regression forest document")
        return cls(trees=doc["trees"], params=ForestParams.from_dict(doc["params"]),
                   n_features=int(doc["n_features"]), seed=None)


def fit_regression_forest(features, values, params: ForestParams, seed) -> RegressionForest:
    x = np.atleast_2d(np.asarray(features, dtype=float))
    y = np.asarray(values, dtype=float)
    n = y.size
    if n < 2 * params.leaf_min:
        raise ValueError(f"need at least {2 * params.leaf_min} subjects")
    trees, boots = [], []
    for child in seed_sequence(seed, "regression").spawn(params.n_trees):
        rng = np.random.default_rng(child)
        idx = rng.integers(0, n, n)
        boots.append(idx)
        trees.append(_grow_regression_tree(x[idx], y[idx], params, rng))
    return RegressionForest(trees, params, x.shape[1], seed, bootstrap_indices=boots)


# ---- out-of-bag diagnostics --------------------------------------------------


def concordance_index(times, events, risk) -> float:
    """Fraction of comparable pairs ordered correctly by the risk score."""
    times = np.asarray(times, dtype=float)
    events = np.asarray(events)
    risk = np.asarray(risk, dtype=float)
    num = den = 0.0
    for i in range(times.size):
        if events[i] != 1:
            continue
        later = times > times[i]
        den += later.sum()
        num += (risk[i] > risk[later]).sum() + 0.5 * (risk[i] == risk[later]).sum()
    return num / den if den > 0 else float("nan")


def oob_concordance(forest: SurvivalForest, features, times, events) -> float:
    """Out-of-bag concordance of the ensemble cumulative hazard risk score."""
    x = np.atleast_2d(np.asarray(features, dtype=float))
    times = np.asarray(times, dtype=float)
    events = np.asarray(events, dtype=np.int64)
    if forest.orientation == "censoring":
        events = 1 - events
    n = times.size
    horizon = float(np.quantile(times, 0.75))
    risk = np.zeros(n)
    hits = np.zeros(n)
    rows = np.arange(n)
    for tree, boot in zip(forest.trees, forest.bootstrap_indices):
        oob = np.ones(n, dtype=bool)
        oob[boot] = False
        if not np.any(oob):
            continue
        groups: list = []
        _route_leaves(tree, x, rows[oob], groups)
        for leaf, idx in groups:
            pos = np.searchsorted(leaf["times"], horizon, side="right")
            haz = np.concatenate([[0.0], leaf["cumhaz"]])[pos]
            risk[idx] += haz
            hits[idx] += 1
    ok = hits > 0
    return concordance_index(times[ok], events[ok], risk[ok] / hits[ok])
