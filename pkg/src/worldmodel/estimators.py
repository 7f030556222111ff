"""Scikit-learn style wrappers around model learning and policy-query extraction."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .agents import GoalConditionedAgent, train_from_trajectory
from .cmp import Cmp, Trajectory
from .extraction import ALG2, BINARY, extract_full_model


def _check_pairs(X, n_states: int, n_actions: int) -> np.ndarray:
    X = np.asarray(X)
    if X.ndim != 2 or X.shape[1] != 2 or not np.issubdtype(X.dtype, np.integer):
        raise ValueError("expected an integer array of (state, action) pairs with shape (m, 2)")
    if X.size and (X.min() < 0 or X[:, 0].max() >= n_states or X[:, 1].max() >= n_actions):
        raise ValueError("state or action index out of range")
    return X


class _TransitionPredictor:
    def predict_proba(self, X) -> np.ndarray:
        """Next-state distributions for rows of ``(state, action)`` pairs."""
        check_is_fitted(self, "transitions_")
        X = _check_pairs(X, self.n_states, self.n_actions)
        return self.transitions_[X[:, 0], X[:, 1]]

    def predict(self, X) -> np.ndarray:
        """Most likely next state for each ``(state, action)`` pair."""
        return self.predict_proba(X).argmax(axis=1)

    def score(self, env: Cmp, y=None, support_only: bool = True) -> float:
        """Negative mean absolute transition error against ``env`` (unnormalized
        estimates when the estimator keeps them)."""
        check_is_fitted(self, "transitions_")
        est = getattr(self, "raw_estimates_", self.transitions_)
        err = np.abs(est - env.transitions)
        if support_only:
            err = err[env.transitions > 0]
        err = err[np.isfinite(err)]
        return -float(err.mean())


class FrequencyWorldModel(_TransitionPredictor, BaseEstimator):
    """Transition frequencies counted from experience trajectories.

    ``fit`` takes a Trajectory or a list of them; unvisited rows are uniform.
    """

    def __init__(self, n_states: int = 20, n_actions: int = 5):
        self.n_states = n_states
        self.n_actions = n_actions

    def fit(self, X, y=None):
        trajs = [X] if isinstance(X, Trajectory) else list(X)
        if not trajs:
            raise ValueError("need at least one trajectory")
        counts = sum(train_from_trajectory(t, self.n_states, self.n_actions).visit_counts
                     for t in trajs)
        totals = counts.sum(axis=2, keepdims=True)
        self.visit_counts_ = counts
        self.transitions_ = np.where(totals > 0, counts / np.maximum(totals, 1), 1.0 / self.n_states)
        self.n_samples_ = int(counts.sum())
        return self

    def to_agent(self) -> GoalConditionedAgent:
        check_is_fitted(self, "transitions_")
        return GoalConditionedAgent(self.transitions_, strict_reach=False, name="model-based")


class PolicyWorldModelExtractor(_TransitionPredictor, BaseEstimator):
    """Recovers transition probabilities from a goal-conditioned policy alone.

    ``fit`` takes any callable ``policy(history, goal) -> action``. Pass
    ``truth`` to keep per-transition errors and bounds in ``report_``.
    """

    def __init__(self, n_states: int = 20, n_actions: int = 5, trials: int = 50,
                 algorithm: str = ALG2, search: str = BINARY, start_state: int = 0):
        self.n_states = n_states
        self.n_actions = n_actions
        self.trials = trials
        self.algorithm = algorithm
        self.search = search
        self.start_state = start_state

    def fit(self, X, y=None, truth: Cmp | None = None):
        if not callable(X):
            raise TypeError("fit expects a policy callable")
        rep = extract_full_model(X, self.n_states, self.n_actions, self.trials,
                                 algorithm=self.algorithm, search=self.search,
                                 s0=self.start_state, truth=truth)
        self.report_ = rep
        self.raw_estimates_ = rep.estimates
        self.switch_index_ = rep.switch_index
        self.transitions_ = rep.normalized()
        self.goal_depth_ = 2 * self.trials + 1
        return self
