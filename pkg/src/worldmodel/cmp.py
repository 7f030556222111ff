"""Finite controlled Markov processes: generation, sampling and reachability."""

from __future__ import annotations

import hashlib
import json
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.sparse.csgraph import connected_components

ROW_TOL = 1e-12
PROB_FLOOR = 1e-15
MAX_ATTEMPTS = 1000
CMP_FORMAT = "worldmodel.cmp"


class NotCommunicatingError(ValueError):
    """Raised when an operation needs a communicating process and did not get one."""


@dataclass(frozen=True, eq=False)
class Cmp:
    """Controlled Markov process with dense transitions ``P[s, a, s_next]``."""

    transitions: np.ndarray
    seed: Optional[int] = None

    def __post_init__(self):
        P = np.asarray(self.transitions, dtype=float)
        if P.ndim != 3 or P.shape[0] != P.shape[2]:
            raise ValueError(f"transitions must have shape (S, A, S), got {P.shape}")
        if P.shape[1] < 2:
            raise ValueError("a controlled Markov process needs at least two actions")
        if np.any(P < 0) or np.any(P > 1):
            raise ValueError("transition probabilities must lie in [0, 1]")
        bad = np.abs(P.sum(axis=2) - 1.0) > ROW_TOL
        if np.any(bad):
            s, a = np.argwhere(bad)[0]
            raise ValueError(f"row ({s}, {a}) sums to {P[s, a].sum()!r}, not 1")
        P.setflags(write=False)
        object.__setattr__(self, "transitions", P)

    @property
    def n_states(self) -> int:
        return self.transitions.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transitions.shape[1]

    def support(self) -> np.ndarray:
        """Boolean adjacency: ``s -> s'`` iff some action reaches s' with P > 0."""
        return self.transitions.max(axis=1) > 0

    def digest(self) -> str:
        return hashlib.sha256(self.transitions.tobytes()).hexdigest()[:16]

    def __eq__(self, other):
        if not isinstance(other, Cmp):
            return NotImplemented
        return np.array_equal(self.transitions, other.transitions)

    __hash__ = None


@dataclass
class Trajectory:
    """Alternating states and actions ``s0, a0, s1, a1, ...``.

    A history ends on a state (``len(actions) == len(states) - 1``); a full
    trajectory may also record the last action.
    """

    states: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    seed: Optional[int] = None

    def __post_init__(self):
        self.states = [int(s) for s in self.states]
        self.actions = [int(a) for a in self.actions]
        if not self.states:
            raise ValueError("a trajectory needs at least one state")
        if not len(self.states) - 1 <= len(self.actions) <= len(self.states):
            raise ValueError(
                f"{len(self.actions)} actions do not fit {len(self.states)} states"
            )

    def __len__(self):
        return len(self.states)

    @property
    def n_transitions(self) -> int:
        return len(self.states) - 1

    def check_bounds(self, n_states: int, n_actions: int) -> None:
        if any(not 0 <= s < n_states for s in self.states):
            raise ValueError("trajectory state out of range")
        if any(not 0 <= a < n_actions for a in self.actions):
            raise ValueError("trajectory action out of range")


@dataclass(frozen=True)
class MarkovPolicy:
    """Deterministic stationary policy given as one action per state."""

    action_of: tuple

    def __post_init__(self):
        object.__setattr__(self, "action_of", tuple(int(a) for a in self.action_of))

    def __call__(self, history: Trajectory) -> int:
        return self.action_of[history.states[-1]]

    def __getitem__(self, state: int) -> int:
        return self.action_of[state]


def _clean_rows(P: np.ndarray) -> np.ndarray:
    P = np.where(P < PROB_FLOOR, 0.0, P)
    return P / P.sum(axis=-1, keepdims=True)


OUTCOME_COUNTS = ("exact", "uniform")


def random_cmp(n_states: int, n_actions: int, max_outcomes: int, seed: int,
               outcome_count: str = "exact") -> Cmp:
    """Draw a sparse communicating process by rejection sampling.

    Every (s, a) row puts flat Dirichlet weights on distinct successors chosen
    uniformly at random. With ``outcome_count="exact"`` each row has
    ``max_outcomes`` successors; with ``"uniform"`` the count is drawn from
    ``1..max_outcomes`` per row.
    """
    if n_states < 1:
        raise ValueError("n_states must be positive")
    if n_actions < 2:
        raise ValueError("n_actions must be at least 2")
    if not 1 <= max_outcomes <= n_states:
        raise ValueError("max_outcomes must lie in [1, n_states]")
    if outcome_count not in OUTCOME_COUNTS:
        raise ValueError(f"outcome_count must be one of {OUTCOME_COUNTS}")

    rng = np.random.default_rng(seed)
    for _ in range(MAX_ATTEMPTS):
        P = np.zeros((n_states, n_actions, n_states))
        for s in range(n_states):
            for a in range(n_actions):
                k = max_outcomes if outcome_count == "exact" else int(rng.integers(1, max_outcomes + 1))
                succ = rng.choice(n_states, size=k, replace=False)
                P[s, a, succ] = rng.dirichlet(np.ones(k))
        P = _clean_rows(P)
        env = Cmp(P, seed=seed)
        if is_communicating(env):
            return env
    raise NotCommunicatingError(
        f"no communicating process found in {MAX_ATTEMPTS} attempts "
        f"(n_states={n_states}, n_actions={n_actions}, max_outcomes={max_outcomes})"
    )


def is_communicating(env: Cmp) -> bool:
    n_comp, _ = connected_components(env.support(), directed=True, connection="strong")
    return n_comp == 1


def sample_trajectory(
    env: Cmp,
    policy: Optional[Callable[[Trajectory], int]],
    s0: int,
    length: int,
    seed: int,
) -> Trajectory:
    """Roll out ``length`` transitions from ``s0``.

    ``policy=None`` is the uniformly random policy, driven by the same seed.
    The policy sees the growing history object and must not mutate it.
    """
    if length < 0:
        raise ValueError("length must be non-negative")
    if not 0 <= s0 < env.n_states:
        raise ValueError(f"start state {s0} out of range")

    rng = np.random.default_rng(seed)
    cdf = np.cumsum(env.transitions, axis=2)
    cdf[..., -1] = 1.0
    u = rng.random(length)
    random_actions = rng.integers(env.n_actions, size=length) if policy is None else None

    traj = Trajectory([s0], [], seed=seed)
    s = s0
    for t in range(length):
        a = int(random_actions[t]) if policy is None else int(policy(traj))
        s = int(np.searchsorted(cdf[s, a], u[t], side="right"))
        traj.actions.append(a)
        traj.states.append(s)
    return traj


def tree_policy(transitions: np.ndarray, target: int, strict: bool = True) -> MarkovPolicy:
    """State-tree policy that steers towards ``target``.

    Breadth-first layering from the target over reversed positive-probability
    edges; each state takes the most likely action into its tree child (lowest
    index on ties). The target itself takes action 0. With ``strict=False``
    states outside the tree also get action 0 instead of raising.
    """
    P = np.asarray(transitions)
    n = P.shape[0]
    can_enter = P.max(axis=1) > 0  # [from, to]
    action = [0] * n
    placed = [False] * n
    placed[target] = True
    queue = deque([target])
    while queue:
        child = queue.popleft()
        for z in range(n):
            if not placed[z] and can_enter[z, child]:
                placed[z] = True
                action[z] = int(np.argmax(P[z, :, child]))
                queue.append(z)
    if strict and not all(placed):
        stranded = [z for z in range(n) if not placed[z]]
        raise NotCommunicatingError(f"states {stranded} cannot reach {target}")
    return MarkovPolicy(tuple(action))


def reach_policy(env: Cmp, target: int) -> MarkovPolicy:
    return tree_policy(env.transitions, target, strict=True)


def induced_chain(env: Cmp, policy: MarkovPolicy) -> np.ndarray:
    idx = np.arange(env.n_states)
    return env.transitions[idx, np.asarray(policy.action_of), :]


def hitting_probabilities(Q: np.ndarray, target: int) -> np.ndarray:
    """Probability of ever hitting ``target`` in the Markov chain ``Q``.

    Minimal non-negative solution: states with no path to the target get 0,
    the rest solve a nonsingular linear system.
    """
    n = Q.shape[0]
    reaches = np.zeros(n, dtype=bool)
    reaches[target] = True
    frontier = [target]
    edges = Q > 0
    while frontier:
        nxt = np.flatnonzero(edges[:, frontier].any(axis=1) & ~reaches)
        reaches[nxt] = True
        frontier = list(nxt)

    rho = np.zeros(n)
    rho[target] = 1.0
    U = np.flatnonzero(reaches)
    U = U[U != target]
    if U.size:
        A = np.eye(U.size) - Q[np.ix_(U, U)]
        b = Q[U, target]
        x = np.linalg.solve(A, b)
        x += np.linalg.solve(A, b - A @ x)  # one refinement step
        resid = np.max(np.abs(A @ x - b))
        if resid > ROW_TOL:
            raise np.linalg.LinAlgError(f"hitting system residual {resid:.3g}")
        rho[U] = np.clip(x, 0.0, 1.0)
    return rho


def reach_probabilities(env: Cmp, policy: MarkovPolicy, target: int) -> np.ndarray:
    return hitting_probabilities(induced_chain(env, policy), target)


def save_cmp(env: Cmp, path) -> None:
    """Write ``env`` as JSON; probabilities are stored as ``repr`` strings."""
    doc = {
        "format": CMP_FORMAT,
        "version": 1,
        "n_states": env.n_states,
        "n_actions": env.n_actions,
        "seed": env.seed,
        "transitions": [[[repr(float(p)) for p in row] for row in block]
                        for block in env.transitions],
    }
    Path(path).write_text(json.dumps(doc, indent=1))


def cmp_from_dict(doc: dict) -> Cmp:
    if doc.get("format") != CMP_FORMAT:
        raise ValueError(f"not a {CMP_FORMAT} document")
    P = np.array([[[float(p) for p in row] for row in block]
                  for block in doc["transitions"]])
    if P.shape != (doc["n_states"], doc["n_actions"], doc["n_states"]):
        raise ValueError(f"declared dimensions do not match tensor shape {P.shape}")
    return Cmp(P, seed=doc.get("seed"))


def load_cmp(path) -> Cmp:
    return cmp_from_dict(json.loads(Path(path).read_text()))


def deterministic_cycle(n_states: int, n_actions: int = 2) -> Cmp:
    """Every action moves ``s -> s+1 (mod n)`` with certainty."""
    P = np.zeros((n_states, n_actions, n_states))
    for s in range(n_states):
        P[s, :, (s + 1) % n_states] = 1.0
    return Cmp(P)


def from_rows(rows: Sequence, n_actions: int) -> Cmp:
    """Action-independent process: every action uses ``rows[s]``."""
    rows = np.asarray(rows, dtype=float)
    return Cmp(np.repeat(rows[:, None, :], n_actions, axis=1))
