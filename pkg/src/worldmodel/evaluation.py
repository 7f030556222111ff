"""Exact success probabilities and regret for counting goals, plus Monte-Carlo checks."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .binomial import branch_value
from .cmp import Cmp, Trajectory, reach_probabilities
from .goals import Branch, CountingGoal, Predicate, Verdict, satisfies_counting

CLAMP_SLACK = 1e-12


@dataclass(frozen=True)
class RegretRecord:
    goal: CountingGoal
    p_agent: float
    p_opt: float
    delta: float


def optimal_success_probability(env: Cmp, cg: CountingGoal) -> float:
    p = float(env.transitions[cg.state, cg.action, cg.outcome])
    return max(branch_value(b, p) for b in cg.branches)


def _trial_masses(env: Cmp, cg: CountingGoal, rho: np.ndarray):
    row = env.transitions[cg.state, cg.action]
    p = float(row[cg.outcome])
    succ = p * rho[cg.outcome]
    fail = float(row @ rho) - succ
    return p, succ, fail


def branch_success_probability(env: Cmp, cg: CountingGoal, branch: Branch,
                               rho: np.ndarray, s0: int) -> float:
    """Probability of satisfying ``branch`` when the agent opens with its first
    action and then returns to the probe state with probabilities ``rho``."""
    n = branch.trials
    if n == 0:
        return 1.0
    if s0 == cg.state and branch.first_action == cg.action:
        start = 1.0  # the opening move is already the first trial
    else:
        start = float(env.transitions[s0, branch.first_action] @ rho)
    p, succ, fail = _trial_masses(env, cg, rho)

    if branch.predicate is Predicate.ALL_SUCCEED:
        return start * succ ** (n - 1) * p
    if branch.predicate is Predicate.ALL_FAIL:
        return start * fail ** (n - 1) * (1.0 - p)

    # dist[r]: probability of r successes so far with the agent back at the probe state
    dist = np.zeros(n + 1)
    dist[0] = start
    for _ in range(n - 1):
        dist[1:] = dist[1:] * fail + dist[:-1] * succ
        dist[0] *= fail
    final = np.zeros(n + 1)
    final[1:] = dist[:-1] * p
    final += dist * (1.0 - p)
    return float(sum(final[r] for r in branch.success_counts()))


def agent_success_probability(env: Cmp, agent, cg: CountingGoal, s0: int = 0) -> float:
    """Exact probability that ``agent`` satisfies ``cg`` in the true ``env``."""
    plan = agent.plan(cg)
    rho = reach_probabilities(env, plan.reach, cg.state)
    return branch_success_probability(env, cg, cg.branches[plan.branch_index], rho, s0)


def regret(env: Cmp, agent, cg: CountingGoal, s0: int = 0) -> RegretRecord:
    p_agent = agent_success_probability(env, agent, cg, s0)
    p_opt = optimal_success_probability(env, cg)
    if p_agent > p_opt + CLAMP_SLACK:
        raise AssertionError(f"agent beats the optimum: {p_agent!r} > {p_opt!r} on {cg}")
    delta = 0.0 if p_opt == 0 else min(1.0, max(0.0, 1.0 - p_agent / p_opt))
    return RegretRecord(cg, p_agent, p_opt, delta)


class RegretMeter:
    """Regret of one agent over many goals, caching the per-target reach solve."""

    def __init__(self, env: Cmp, agent, s0: int = 0):
        self.env, self.agent, self.s0 = env, agent, s0
        self._rho: dict = {}
        self.records: list = []

    def _rho_for(self, target: int) -> np.ndarray:
        rho = self._rho.get(target)
        if rho is None:
            rho = reach_probabilities(self.env, self.agent.reach(target), target)
            self._rho[target] = rho
        return rho

    def __call__(self, cg: CountingGoal) -> RegretRecord:
        idx = self.agent.choose_branch(cg)
        rho = self._rho_for(cg.state)
        p_agent = branch_success_probability(self.env, cg, cg.branches[idx], rho, self.s0)
        p_opt = optimal_success_probability(self.env, cg)
        if p_agent > p_opt + CLAMP_SLACK:
            raise AssertionError(f"agent beats the optimum: {p_agent!r} > {p_opt!r} on {cg}")
        delta = 0.0 if p_opt == 0 else min(1.0, max(0.0, 1.0 - p_agent / p_opt))
        rec = RegretRecord(cg, p_agent, p_opt, delta)
        self.records.append(rec)
        return rec


def mean_metrics(reports: Sequence, records: Sequence, support_only: bool = False):
    """Mean per-transition error over the reports and mean regret over the records."""
    if not reports or not records:
        raise ValueError("mean_metrics needs at least one report and one regret record")
    errors = np.concatenate([r.error_values(support_only) for r in reports])
    deltas = np.array([rec.delta for rec in records])
    return float(errors.mean()), float(deltas.mean())


@dataclass(frozen=True)
class MonteCarloResult:
    successes: int
    unknown: int
    rollouts: int

    @property
    def frequency(self) -> float:
        return self.successes / self.rollouts

    @property
    def unknown_fraction(self) -> float:
        return self.unknown / self.rollouts

    def stderr(self, p: float) -> float:
        return float(np.sqrt(max(p * (1 - p), 0.0) / self.rollouts))


def monte_carlo_success(env: Cmp, agent, cg: CountingGoal, s0: int = 0,
                        rollouts: int = 100_000, seed: int = 0,
                        leg_budget: Optional[int] = None) -> MonteCarloResult:
    """Simulate the agent's plan for ``cg`` in ``env`` over many rollouts at once.

    Each return leg to the probe state is cut after ``leg_budget`` steps
    (default ``50 * n_states``); cut rollouts count as unknown, not success.
    """
    plan = agent.plan(cg)
    branch = cg.branches[plan.branch_index]
    if branch.trials == 0:
        return MonteCarloResult(rollouts, 0, rollouts)
    budget = 50 * env.n_states if leg_budget is None else leg_budget
    rng = np.random.default_rng(seed)
    cdf = np.cumsum(env.transitions, axis=2)
    cdf[..., -1] = 1.0
    reach = np.asarray(plan.reach.action_of)

    state = np.full(rollouts, s0)
    done = np.zeros(rollouts, dtype=np.int64)
    succ = np.zeros(rollouts, dtype=np.int64)
    leg = np.zeros(rollouts, dtype=np.int64)
    active = np.ones(rollouts, dtype=bool)
    cut = np.zeros(rollouts, dtype=bool)
    first = True
    while active.any():
        idx = np.flatnonzero(active)
        st = state[idx]
        if first:
            act = np.full(idx.size, plan.first_action)
            first = False
        else:
            act = np.where(st == cg.state, cg.action, reach[st])
        u = rng.random(idx.size)
        nxt = (u[:, None] >= cdf[st, act]).sum(axis=1)
        trial = (st == cg.state) & (act == cg.action)
        done[idx] += trial
        succ[idx] += trial & (nxt == cg.outcome)
        leg[idx] = np.where(trial, 0, leg[idx] + 1)
        state[idx] = nxt
        finished = done[idx] >= branch.trials
        over = leg[idx] > budget
        cut[idx[over & ~finished]] = True
        active[idx[finished | over]] = False

    ok = ~cut & (done >= branch.trials)
    accepted = np.isin(succ, list(branch.success_counts()))
    return MonteCarloResult(int((ok & accepted).sum()), int(cut.sum()), rollouts)


def rollout_verdict(env: Cmp, agent, cg: CountingGoal, s0: int, max_steps: int,
                    seed: int) -> Verdict:
    """Slow path: step the agent's ``act`` and judge the trajectory with the goal checker."""
    rng = np.random.default_rng(seed)
    traj = Trajectory([s0], [], seed=seed)
    for _ in range(max_steps):
        a = agent.act(traj, cg)
        traj.actions.append(a)
        verdict = satisfies_counting(traj, cg)
        if verdict is not Verdict.UNKNOWN:
            return verdict
        s = traj.states[-1]
        traj.states.append(int(rng.choice(env.n_states, p=env.transitions[s, a])))
        verdict = satisfies_counting(traj, cg)
        if verdict is not Verdict.UNKNOWN:
            return verdict
    return Verdict.UNKNOWN
