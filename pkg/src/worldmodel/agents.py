"""Deterministic goal-conditioned agents: exact-model, learned-model and myopic."""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .binomial import log_branch_value, prefers_first
from .cmp import Cmp, MarkovPolicy, Trajectory, tree_policy
from .goals import (
    CompositeGoal,
    CountingGoal,
    SequentialGoal,
    myopic_target_set,
)

MODEL_FORMAT = "worldmodel.agent-model"


class UnsupportedGoalError(ValueError):
    """The agent has no policy for this kind of goal."""


@dataclass(frozen=True, eq=False)
class AgentModel:
    """Frequency-count world model ``transitions[s, a, s']`` plus raw visit counts."""

    transitions: np.ndarray
    visit_counts: np.ndarray
    manifest: dict = field(default_factory=dict)

    @property
    def n_states(self) -> int:
        return self.transitions.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transitions.shape[1]


def train_from_trajectory(traj: Trajectory, n_states: int, n_actions: int) -> AgentModel:
    """Empirical transition frequencies; unvisited (s, a) rows stay uniform."""
    traj.check_bounds(n_states, n_actions)
    counts = np.zeros((n_states, n_actions, n_states), dtype=np.int64)
    m = traj.n_transitions
    if m:
        s = np.asarray(traj.states[:-1])
        a = np.asarray(traj.actions[:m])
        s2 = np.asarray(traj.states[1:])
        np.add.at(counts, (s, a, s2), 1)
    totals = counts.sum(axis=2, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        model = np.where(totals > 0, counts / np.maximum(totals, 1), 1.0 / n_states)
    manifest = {"seed": traj.seed, "n_samples": m}
    return AgentModel(model, counts, manifest)


def save_agent_model(model: AgentModel, path) -> None:
    doc = {
        "format": MODEL_FORMAT,
        "version": 1,
        "n_states": model.n_states,
        "n_actions": model.n_actions,
        "manifest": model.manifest,
        "transitions": [[[repr(float(p)) for p in row] for row in block]
                        for block in model.transitions],
        "visit_counts": model.visit_counts.tolist(),
    }
    Path(path).write_text(json.dumps(doc, indent=1))


def load_agent_model(path) -> AgentModel:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != MODEL_FORMAT:
        raise ValueError(f"{path} is not a {MODEL_FORMAT} document")
    P = np.array([[[float(p) for p in row] for row in block] for block in doc["transitions"]])
    counts = np.array(doc["visit_counts"], dtype=np.int64)
    if P.shape != counts.shape or P.shape != (doc["n_states"], doc["n_actions"], doc["n_states"]):
        raise ValueError("agent model dimensions are inconsistent")
    return AgentModel(P, counts, doc.get("manifest", {}))


@dataclass(frozen=True)
class ExecutionPlan:
    """What the agent does for a counting goal: open with ``first_action``,
    take the probe action whenever in the probe state, else follow ``reach``."""

    first_action: int
    reach: MarkovPolicy
    branch_index: int


class GoalConditionedAgent:
    """Plans against a believed transition tensor.

    Counting goals: pick the branch whose best success probability is larger
    under the belief (ties to the first branch), then run the trial loop with
    a state-tree reach policy built on the belief's support. Myopic goals:
    maximise the believed probability of the next state landing in the goal set.
    """

    def __init__(self, belief: np.ndarray, strict_reach: bool = True, name: str = "agent"):
        self.belief = np.asarray(belief, dtype=float)
        self.strict_reach = strict_reach
        self.name = name
        self._reach_cache: dict = {}

    @property
    def n_states(self) -> int:
        return self.belief.shape[0]

    @property
    def n_actions(self) -> int:
        return self.belief.shape[1]

    def reach(self, target: int) -> MarkovPolicy:
        pol = self._reach_cache.get(target)
        if pol is None:
            pol = tree_policy(self.belief, target, strict=self.strict_reach)
            self._reach_cache[target] = pol
        return pol

    def choose_branch(self, cg: CountingGoal) -> int:
        p = float(self.belief[cg.state, cg.action, cg.outcome])
        va = log_branch_value(cg.branch_a, p)
        vb = log_branch_value(cg.branch_b, p)
        return 0 if prefers_first(va, vb) else 1

    def plan(self, cg: CountingGoal) -> ExecutionPlan:
        idx = self.choose_branch(cg)
        return ExecutionPlan(cg.branches[idx].first_action, self.reach(cg.state), idx)

    def myopic_action(self, state: int, targets) -> int:
        mass = self.belief[state][:, sorted(targets)].sum(axis=1)
        return int(np.argmax(mass))

    def act(self, history: Trajectory, goal) -> int:
        if isinstance(goal, CountingGoal):
            if len(history.states) == 1:
                return goal.branches[self.choose_branch(goal)].first_action
            s_t = history.states[-1]
            if s_t == goal.state:
                return goal.action
            return self.reach(goal.state)[s_t]
        if isinstance(goal, (SequentialGoal, CompositeGoal)):
            try:
                targets = myopic_target_set(goal, self.n_states)
            except ValueError as exc:
                raise UnsupportedGoalError(str(exc)) from None
            return self.myopic_action(history.states[-1], targets)
        raise UnsupportedGoalError(f"unsupported goal type {type(goal).__name__}")

    __call__ = act

    def __repr__(self):
        return f"{type(self).__name__}({self.name}, states={self.n_states}, actions={self.n_actions})"


def optimal_agent(env: Cmp) -> GoalConditionedAgent:
    return GoalConditionedAgent(env.transitions, strict_reach=True, name="optimal")


def model_based_agent(model: AgentModel) -> GoalConditionedAgent:
    """Agent planning with a learned model; stranded states fall back to action 0."""
    return GoalConditionedAgent(model.transitions, strict_reach=False, name="model-based")


@dataclass(frozen=True)
class MyopicActionTable:
    best: dict

    def __getitem__(self, key):
        return self.best[key]


class MyopicAgent:
    """Optimal only for goals ``next([S in y])``; anything else is rejected."""

    def __init__(self, env: Cmp):
        self.env = env
        self._table: dict = {}

    def best(self, state: int, targets) -> int:
        key = (int(state), frozenset(targets))
        a = self._table.get(key)
        if a is None:
            mass = self.env.transitions[state][:, sorted(key[1])].sum(axis=1)
            a = int(np.argmax(mass))
            self._table[key] = a
        return a

    def act(self, history: Trajectory, goal) -> int:
        if isinstance(goal, CountingGoal):
            raise UnsupportedGoalError("myopic agents only answer depth-1 Next goals")
        try:
            targets = myopic_target_set(goal, self.env.n_states)
        except ValueError as exc:
            raise UnsupportedGoalError(str(exc)) from None
        return self.best(history.states[-1], targets)

    __call__ = act

    def table(self) -> MyopicActionTable:
        """Full ``(s0, y) -> action`` table over every nonempty subset ``y``."""
        n = self.env.n_states
        best = {}
        for s0 in range(n):
            for r in range(1, n + 1):
                for y in itertools.combinations(range(n), r):
                    best[(s0, frozenset(y))] = self.best(s0, y)
        return MyopicActionTable(best)


def myopic_agent(env: Cmp) -> MyopicAgent:
    return MyopicAgent(env)


def uniform_model(n_states: int, n_actions: int) -> AgentModel:
    return train_from_trajectory(Trajectory([0]), n_states, n_actions)


def model_from_cmp(env: Cmp, manifest: Optional[dict] = None) -> AgentModel:
    """Exact model (no counts) for the degenerate 'perfectly trained' agent."""
    return AgentModel(np.array(env.transitions), np.zeros(env.transitions.shape, dtype=np.int64),
                      dict(manifest or {}))
