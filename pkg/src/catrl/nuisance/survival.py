"""Product-limit survival curves and exact step-function integration."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def step_restricted_mean(times: np.ndarray, values: np.ndarray, tau: float) -> float:
    """Integrate a right-continuous step survival function on [0, tau].

    The curve is 1 on [0, times[0]) and values[i] on [times[i], times[i+1]).
    Exact over the step function; no quadrature.
    """
    if tau <= 0:
        return 0.0
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    grid = np.concatenate([[0.0], times])
    vals = np.concatenate([[1.0], values])
    ends = np.concatenate([times, [np.inf]])
    lo = np.minimum(grid, tau)
    hi = np.minimum(ends, tau)
    return float(np.sum(vals * np.maximum(hi - lo, 0.0)))


@dataclass
class SurvivalCurve:
    """Right-continuous step function: S(t) = values[i] for t in [times[i], times[i+1])."""

    times: np.ndarray      # increasing event-time grid
    values: np.ndarray     # non-increasing, within [0, 1]

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.times.shape != self.values.shape:
            raise ValueError("times and values must align")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be strictly increasing")
        if np.any(np.diff(self.values) > 1e-12):
            raise ValueError("survival values must be non-increasing")
        if self.values.size and (self.values[0] > 1.0 + 1e-12 or self.values[-1] < -1e-12):
            raise ValueError("survival values must lie in [0, 1]")

    def at(self, t) -> np.ndarray:
        """Evaluate S(t); 1 before the first event, last value carried forward."""
        t = np.asarray(t, dtype=float)
        if self.times.size == 0:
            return np.ones_like(t)
        idx = np.searchsorted(self.times, t, side="right")
        padded = np.concatenate([[1.0], self.values])
        return padded[idx]

    def restricted_mean(self, tau: float) -> float:
        return step_restricted_mean(self.times, self.values, tau)


def fit_km(times, events) -> SurvivalCurve:
    """Kaplan-Meier product-limit estimator.

    Ties are handled by processing deaths before censorings at equal times:
    a subject censored at t is still at risk for the death at t.
    """
    times = np.asarray(times, dtype=float)
    events = np.asarray(events)
    if times.size == 0:
        raise ValueError("empty input")
    if times.shape != events.shape:
        raise ValueError("times and events must align")
    if np.any(times < 0):
        raise ValueError("times must be non-negative")
    if not np.all(np.isin(events, (0, 1))):
        raise ValueError("events must be binary")

    order = np.argsort(times, kind="stable")
    ts = times[order]
    ev = events[order].astype(float)
    n = ts.size
    starts = np.flatnonzero(np.concatenate([[True], ts[1:] != ts[:-1]]))
    d = np.add.reduceat(ev, starts)
    at_risk = n - starts
    keep = d > 0
    if not np.any(keep):
        return SurvivalCurve(times=np.empty(0), values=np.empty(0))
    etimes = ts[starts][keep]
    factors = 1.0 - d[keep] / at_risk[keep]
    return SurvivalCurve(times=etimes, values=np.cumprod(factors))


def km_rmst_stderr(times, events, tau: float) -> float:
    """Greenwood-style standard error of the KM restricted mean on [0, tau]."""
    times = np.asarray(times, dtype=float)
    events = np.asarray(events)
    curve = fit_km(times, events)
    if curve.times.size == 0:
        return 0.0
    order = np.argsort(times, kind="stable")
    ts, ev = times[order], events[order].astype(float)
    starts = np.flatnonzero(np.concatenate([[True], ts[1:] != ts[:-1]]))
    d = np.add.reduceat(ev, starts)
    at_risk = (ts.size - starts).astype(float)
    ut = ts[starts]
    mask = (d > 0) & (ut < tau) & (at_risk > d)
    var = 0.0
    for t_j, d_j, n_j in zip(ut[mask], d[mask], at_risk[mask]):
        tail = curve.restricted_mean(tau) - step_restricted_mean(
            curve.times, curve.values, t_j)
        var += tail * tail * d_j / (n_j * (n_j - d_j))
    return float(np.sqrt(var))
