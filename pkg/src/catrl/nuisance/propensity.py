"""Multinomial logistic regression propensities with a Newton solver."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class PositivityError(RuntimeError):
    """A treatment arm is absent from the fitting sample."""


@dataclass
class PropensityModel:
    """Softmax model with arm 0 as the reference category.

    coef has shape (n_arms - 1, 1 + n_features): intercept first. Predictions
    are clipped to `clip` and renormalized before use as IPW denominators.
    """

    coef: np.ndarray
    n_arms: int
    feature_indices: list[int] | None = None
    clip: tuple[float, float] = (0.01, 0.99)
    converged: bool = True
    grad_norm: float = 0.0

    def design(self, h: np.ndarray) -> np.ndarray:
        h = np.atleast_2d(np.asarray(h, dtype=float))
        if self.feature_indices is not None:
            h = h[:, self.feature_indices]
        return np.column_stack([np.ones(h.shape[0]), h])

    def to_doc(self) -> dict:
        return {
            "doc_version": 1,
            "kind": "propensity",
            "n_arms": self.n_arms,
            "coef": [[float(v) for v in row] for row in self.coef],
            "feature_indices": self.feature_indices,
            "clip": [self.clip[0], self.clip[1]],
        }

    @classmethod
    def from_doc(cls, doc: dict) -> "PropensityModel":
        if doc.get("doc_version") != 1 or doc.get("kind") != "propensity":
            raise ValueError("unsupported propensity document")
        return cls(coef=np.asarray(doc["coef"], dtype=float),
                   n_arms=int(doc["n_arms"]),
                   feature_indices=doc["feature_indices"],
                   clip=tuple(doc["clip"]))


def _raw_probs(model: PropensityModel, h: np.ndarray) -> np.ndarray:
    x = model.design(h)
    logits = np.column_stack([np.zeros(x.shape[0]), x @ model.coef.T])
    logits -= logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=1, keepdims=True)


def predict_propensity(model: PropensityModel, h) -> np.ndarray:
    """Per-arm probabilities, clipped to model.clip then renormalized.

    Rows sum to 1 within 1e-12; the clip guards IPW denominators against
    extreme histories.
    """
    p = _raw_probs(model, h)
    lo, hi = model.clip
    p = np.clip(p, lo, hi)
    return p / p.sum(axis=1, keepdims=True)


def fit_propensity(features, arms, n_arms: int, ridge: float = 1e-4,
                   feature_indices: list[int] | None = None,
                   clip: tuple[float, float] = (0.01, 0.99),
                   tol: float = 1e-6, max_iter: int = 200) -> PropensityModel:
    """Maximize the ridge-penalized multinomial log-likelihood by Newton steps.

    The penalty (on the mean log-likelihood scale) excludes intercepts.
    Deterministic from the data: zero initialization, damped Newton until the
    sup-norm of the gradient falls below `tol`.

    Raises PositivityError when any arm in 0..n_arms-1 is unobserved.
    """
    features = np.atleast_2d(np.asarray(features, dtype=float))
    arms = np.asarray(arms, dtype=np.int64)
    counts = np.bincount(arms, minlength=n_arms)
    if np.any(counts == 0):
        missing = [int(a) for a in np.flatnonzero(counts == 0)]
        raise PositivityError(
            f"positivity violated in sample: arm(s) {missing} never observed")

    model = PropensityModel(coef=np.zeros((n_arms - 1, 1)), n_arms=n_arms,
                            feature_indices=feature_indices, clip=clip)
    x = model.design(features)
    n, q = x.shape
    k = n_arms - 1
    y = np.zeros((n, k))
    for j in range(k):
        y[:, j] = arms == j + 1

    beta = np.zeros((k, q))
    pen_mask = np.ones(q)
    pen_mask[0] = 0.0   # intercept unpenalized

    def probs(b):
        logits = np.column_stack([np.zeros(n), x @ b.T])
        logits -= logits.max(axis=1, keepdims=True)
        e = np.exp(logits)
        return e / e.sum(axis=1, keepdims=True)

    def nll(b):
        p = probs(b)
        ll = np.log(np.maximum(p[np.arange(n), arms], 1e-300)).mean()
        return -ll + 0.5 * ridge * float(np.sum((b * pen_mask) ** 2))

    current = nll(beta)
    grad_norm = np.inf
    for _ in range(max_iter):
        p = probs(beta)[:, 1:]
        grad = (x.T @ (p - y)).T / n + ridge * beta * pen_mask
        grad_norm = float(np.abs(grad).max())
        if grad_norm < tol:
            break
        hess = np.empty((k * q, k * q))
        for j in range(k):
            for m in range(k):
                w = p[:, j] * ((j == m) - p[:, m])
                block = (x.T * w) @ x / n
                if j == m:
                    block = block + ridge * np.diag(pen_mask)
                hess[j * q:(j + 1) * q, m * q:(m + 1) * q] = block
        try:
            step = np.linalg.solve(hess, grad.ravel()).reshape(k, q)
        except np.linalg.LinAlgError:
            step = grad  # fall back to gradient descent on singular Hessian
        scale = 1.0
        for _ in range(40):
            cand = beta - scale * step
            val = nll(cand)
            if val <= current:
                beta, current = cand, val
                break
            scale *= 0.5
        else:
            break   # no descent direction left; report best found

    model.coef = beta
    model.converged = grad_norm < tol
    model.grad_norm = grad_norm
    return model
