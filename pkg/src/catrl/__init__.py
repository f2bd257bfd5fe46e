"""Censoring-aware tree-based reinforcement learning for treatment regimes.

Learns one interpretable decision tree per treatment stage from
right-censored survival trajectories, via backward induction over
censoring-adjusted doubly robust counterfactual mean estimates.
"""

__version__ = "0.1.0"
