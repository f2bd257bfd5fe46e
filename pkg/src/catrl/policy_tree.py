"""Purity-maximizing treatment-assignment trees.

A node's purity is the best mean counterfactual outcome achievable by
assigning one arm to every subject in the node; a split's improvement is
the size-weighted child purity minus the parent purity (always >= 0 up to
float error). Growth stops on: node size below 2*n0, children below n0,
improvement below lambda, or the depth cap. Depth counts node levels, so
max_depth=1 forces a single root leaf.

Every split's improvement is computed by the same scalar kernel used by
`purity_improvement`, so exhaustive enumeration reproduces the chosen
split bit-for-bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .caipw import CaipwMatrix

TREE_DOC_VERSION = 1


class TreeError(ValueError):
    pass


@dataclass
class Hyperparams:
    n0: int = 15                    # minimum child size
    lambda_: float | None = None    # purity-improvement threshold; None -> auto
    max_depth: int = 3              # node levels, root = 1
    threshold_grid: int = 64        # quantile candidates per feature

    def __post_init__(self):
        if self.n0 < 1 or self.max_depth < 1 or self.threshold_grid < 1:
            raise TreeError("hyperparameters must be positive")
        if self.lambda_ is not None and self.lambda_ < 0:
            raise TreeError("lambda must be >= 0")

    def to_dict(self) -> dict:
        return {"n0": self.n0, "lambda": self.lambda_,
                "max_depth": self.max_depth, "threshold_grid": self.threshold_grid}

    @classmethod
    def from_dict(cls, doc: dict) -> "Hyperparams":
        doc = dict(doc)
        lam = doc.pop("lambda", None)
        return cls(lambda_=lam, **doc)


@dataclass
class PolicyTree:
    """Flat node list; internal nodes route h[feature] <= threshold left."""

    nodes: list[dict]
    root: int
    n_arms: int
    effective_lambda: float
    depth: int

    def predict(self, h) -> int:
        h = np.asarray(h, dtype=float)
        idx = self.root
        while self.nodes[idx]["kind"] == "split":
            node = self.nodes[idx]
            f = node["feature"]
            if f >= h.shape[-1]:
                raise TreeError(f"feature index {f} out of range for history")
            idx = node["left"] if h[f] <= node["threshold"] else node["right"]
        return int(self.nodes[idx]["arm"])

    def predict_batch(self, h) -> np.ndarray:
        h = np.atleast_2d(np.asarray(h, dtype=float))
        out = np.empty(h.shape[0], dtype=np.int64)

        def walk(idx, rows):
            node = self.nodes[idx]
            if node["kind"] == "leaf":
                out[rows] = node["arm"]
                return
            if node["feature"] >= h.shape[1]:
                raise TreeError(f"feature index {node['feature']} out of range")
            mask = h[rows, node["feature"]] <= node["threshold"]
            walk(node["left"], rows[mask])
            walk(node["right"], rows[~mask])

        walk(self.root, np.arange(h.shape[0]))
        return out

    def leaves(self) -> list[dict]:
        return [n for n in self.nodes if n["kind"] == "leaf"]

    def splits(self) -> list[dict]:
        return [n for n in self.nodes if n["kind"] == "split"]


def _arm_sums(values: np.ndarray) -> np.ndarray:
    # Canonical per-arm summation: one np.sum per column so scalar and
    # enumerated code paths agree exactly.
    return np.array([values[:, a].sum() for a in range(values.shape[1])])


def node_value(subject_ids, caipw: CaipwMatrix):
    """Best single-arm mean over the node's rows.

    Returns (value, best_arm); ties resolve to the lowest arm index.
    `subject_ids` are row indices into the matrix.
    """
    ids = np.asarray(subject_ids)
    if ids.size == 0:
        raise TreeError("empty node")
    means = _arm_sums(caipw.values[ids]) / ids.size
    arm = int(np.argmax(means))
    return float(means[arm]), arm


def purity_improvement(parent_ids, left_ids, right_ids, caipw: CaipwMatrix) -> float:
    """Size-weighted child purity minus parent purity."""
    parent = np.asarray(parent_ids)
    left = np.asarray(left_ids)
    right = np.asarray(right_ids)
    if left.size == 0 or right.size == 0:
        raise TreeError("both children must be non-empty")
    if left.size + right.size != parent.size:
        raise TreeError("children must partition the parent")
    v_parent, _ = node_value(parent, caipw)
    v_left, _ = node_value(left, caipw)
    v_right, _ = node_value(right, caipw)
    return (left.size * v_left + right.size * v_right) / parent.size - v_parent


def candidate_thresholds(values: np.ndarray, grid: int) -> np.ndarray:
    """Midpoints between consecutive distinct values when few; otherwise an
    empirical quantile grid of the requested size."""
    u = np.unique(values)
    if u.size < 2:
        return np.empty(0)
    if u.size - 1 <= grid:
        return (u[:-1] + u[1:]) / 2.0
    qs = np.quantile(values, np.arange(1, grid + 1) / (grid + 1))
    return np.unique(qs)


def best_split(subject_ids, features, caipw: CaipwMatrix, hp: Hyperparams,
               lam: float | None = None):
    """Scan features x candidate thresholds for the best purity improvement.

    Returns (feature, threshold, improvement) or None when the node is too
    small, no candidate satisfies the child-size rule, or the best
    improvement does not exceed lambda. Ties break to the lower feature
    index, then the lower threshold.
    """
    ids = np.asarray(subject_ids)
    lam = hp.lambda_ if lam is None else lam
    if lam is None:
        raise TreeError("lambda must be resolved before splitting")
    if ids.size < 2 * hp.n0:
        return None
    feats = np.atleast_2d(np.asarray(features, dtype=float))
    best = None
    for f in range(feats.shape[1]):
        v = feats[ids, f]
        for thr in candidate_thresholds(v, hp.threshold_grid):
            mask = v <= thr
            n_left = int(mask.sum())
            if n_left < hp.n0 or ids.size - n_left < hp.n0:
                continue
            imp = purity_improvement(ids, ids[mask], ids[~mask], caipw)
            if best is None or imp > best[2]:
                best = (f, float(thr), imp)
    if best is None or best[2] <= lam:
        return None
    return best


def resolve_lambda(subject_ids, caipw: CaipwMatrix, hp: Hyperparams) -> float:
    """Auto threshold: 1% of the spread of root-level per-arm means."""
    if hp.lambda_ is not None:
        return hp.lambda_
    ids = np.asarray(subject_ids)
    means = _arm_sums(caipw.values[ids]) / ids.size
    return 0.01 * float(means.max() - means.min())


def grow(subject_ids, features, caipw: CaipwMatrix, hp: Hyperparams) -> PolicyTree:
    """Recursively partition; leaves carry the node's best arm."""
    ids = np.asarray(subject_ids)
    if ids.size == 0:
        raise TreeError("empty root")
    lam = resolve_lambda(ids, caipw, hp)
    feats = np.atleast_2d(np.asarray(features, dtype=float))
    nodes: list[dict] = []

    def rec(node_ids: np.ndarray, level: int) -> tuple[int, int]:
        value, arm = node_value(node_ids, caipw)
        found = None
        if level < hp.max_depth and node_ids.size >= 2 * hp.n0:
            found = best_split(node_ids, feats, caipw, hp, lam)
        if found is None:
            nodes.append({"kind": "leaf", "arm": arm, "value": value,
                          "count": int(node_ids.size)})
            return len(nodes) - 1, level
        f, thr, imp = found
        mask = feats[node_ids, f] <= thr
        slot = len(nodes)
        nodes.append({})
        left, dl = rec(node_ids[mask], level + 1)
        right, dr = rec(node_ids[~mask], level + 1)
        nodes[slot] = {"kind": "split", "feature": int(f), "threshold": thr,
                       "left": left, "right": right, "value": value,
                       "improvement": imp, "count": int(node_ids.size)}
        return slot, max(dl, dr)

    root, depth = rec(ids, 1)
    return PolicyTree(nodes=nodes, root=root, n_arms=caipw.n_arms,
                      effective_lambda=lam, depth=depth)


def predict(tree: PolicyTree, h) -> int:
    return tree.predict(h)


def serialize(tree: PolicyTree) -> dict:
    return {
        "doc_version": TREE_DOC_VERSION,
        "n_arms": tree.n_arms,
        "root": tree.root,
        "depth": tree.depth,
        "effective_lambda": tree.effective_lambda,
        "nodes": [dict(n) for n in tree.nodes],
    }


def deserialize(doc: dict) -> PolicyTree:
    if not isinstance(doc, dict) or doc.get("doc_version") != TREE_DOC_VERSION:
        raise TreeError("unsupported policy tree document")
    try:
        nodes = [dict(n) for n in doc["nodes"]]
        tree = PolicyTree(nodes=nodes, root=int(doc["root"]),
                          n_arms=int(doc["n_arms"]),
                          effective_lambda=float(doc["effective_lambda"]),
                          depth=int(doc["depth"]))
    except (KeyError, TypeError) as exc:
        raise TreeError(f"malformed policy tree document: {exc}") from exc
    for node in tree.nodes:
        kind = node.get("kind")
        if kind == "split":
            if not {"feature", "threshold", "left", "right"} <= node.keys():
                raise TreeError("malformed split node")
        elif kind == "leaf":
            if "arm" not in node:
                raise TreeError("malformed leaf node")
        else:
            raise TreeError(f"unknown node kind {kind!r}")
    return tree


def render_rules(tree: PolicyTree, feature_names: list[str]) -> str:
    """Indented if/else listing of the learned rule."""
    lines: list[str] = []

    def walk(idx: int, indent: int):
        node = tree.nodes[idx]
        pad = "  " * indent
        if node["kind"] == "leaf":
            lines.append(f"{pad}assign arm {node['arm']}  "
                         f"(n={node['count']}, value={node['value']:.4g})")
            return
        name = feature_names[node["feature"]]
        lines.append(f"{pad}if {name} <= {node['threshold']:.6g}:")
        walk(node["left"], indent + 1)
        lines.append(f"{pad}else:")
        walk(node["right"], indent + 1)

    walk(tree.root, 0)
    return "\n".join(lines)


def audit_tree(tree: PolicyTree, features, caipw: CaipwMatrix,
               hp: Hyperparams, subject_ids=None) -> list[str]:
    """Re-derive the stopping-rule guarantees from the training data.

    Checks: leaf size >= n0, split parents >= 2*n0, recomputed improvement
    matches the stored one and exceeds lambda, depth <= max_depth.
    """
    feats = np.atleast_2d(np.asarray(features, dtype=float))
    ids = np.arange(feats.shape[0]) if subject_ids is None else np.asarray(subject_ids)
    problems: list[str] = []
    lam = tree.effective_lambda

    def walk(idx: int, node_ids: np.ndarray, level: int):
        node = tree.nodes[idx]
        if node["count"] != node_ids.size:
            problems.append(f"node {idx}: stored count {node['count']} != routed {node_ids.size}")
        if node["kind"] == "leaf":
            if node_ids.size < hp.n0:
                problems.append(f"leaf {idx}: size {node_ids.size} < n0={hp.n0}")
            if level > hp.max_depth:
                problems.append(f"leaf {idx}: depth {level} > max_depth={hp.max_depth}")
            return
        if node_ids.size < 2 * hp.n0:
            problems.append(f"split {idx}: parent size {node_ids.size} < 2*n0")
        mask = feats[node_ids, node["feature"]] <= node["threshold"]
        left_ids, right_ids = node_ids[mask], node_ids[~mask]
        imp = purity_improvement(node_ids, left_ids, right_ids, caipw)
        if imp != node["improvement"]:
            problems.append(f"split {idx}: improvement mismatch "
                            f"{imp!r} != {node['improvement']!r}")
        if imp <= lam:
            problems.append(f"split {idx}: improvement {imp} <= lambda {lam}")
        walk(node["left"], left_ids, level + 1)
        walk(node["right"], right_ids, level + 1)

    walk(tree.root, ids, 1)
    if tree.depth > hp.max_depth:
        problems.append(f"tree depth {tree.depth} > max_depth={hp.max_depth}")
    return problems
