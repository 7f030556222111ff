"""Recover transition probabilities from a goal-conditioned policy's first actions."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.optimize import brentq

from .agents import MyopicAgent
from .binomial import log_cdf, log_sf
from .cmp import Cmp, Trajectory, from_rows, is_communicating
from .goals import CountingGoal, myopic_goal

LINEAR, BINARY = "linear", "binary"
ALG1, ALG2 = "alg1", "alg2"
ROOT_TOL = 1e-12
ROOT_LO, ROOT_HI = 1e-15, 1.0 - 1e-15

REPORT_COLUMNS = ("s", "a", "s_next", "p_true", "p_hat", "k_star", "n", "branch", "bound", "error")


class CompetenceViolation(RuntimeError):
    """The policy's first action was neither branch's opening action."""


@dataclass(frozen=True)
class Estimate:
    p_hat: float
    k_star: int
    n: int
    branch: str = ""
    queries: int = 0


def _first_action(policy, goal: CountingGoal, s0: int) -> int:
    return int(policy(Trajectory([s0]), goal))


class _Prober:
    """Asks the policy which branch it opens with; records every issued goal."""

    def __init__(self, policy, s0: int, on_query: Optional[Callable] = None):
        self.policy, self.s0, self.on_query = policy, s0, on_query
        self.count = 0

    def picks_a(self, goal: CountingGoal) -> bool:
        a0 = _first_action(self.policy, goal, self.s0)
        self.count += 1
        if self.on_query is not None:
            self.on_query(goal)
        if a0 == goal.branch_a.first_action:
            return True
        if a0 == goal.branch_b.first_action:
            return False
        raise CompetenceViolation(
            f"policy opened with action {a0}, expected {goal.branch_a.first_action} "
            f"or {goal.branch_b.first_action}")


def smallest_switch(pred: Callable[[int], bool], lo: int, hi: int, search: str) -> Optional[int]:
    """Smallest ``k`` in ``[lo, hi]`` with ``pred(k)``; ``None`` if there is none.

    Binary search assumes ``pred`` switches from False to True at most once;
    ``count_switches`` checks that assumption for a given policy.
    """
    if search == LINEAR:
        for k in range(lo, hi + 1):
            if pred(k):
                return k
        return None
    if search != BINARY:
        raise ValueError(f"unknown search mode {search!r}")
    left, right = lo, hi + 1  # answer lies in [left, right]; right means "none"
    while left < right:
        mid = (left + right) // 2
        if pred(mid):
            right = mid
        else:
            left = mid + 1
    return None if left > hi else left


def count_switches(policy, s: int, a: int, s_next: int, n: int, b: int, s0: int = 0) -> int:
    """Number of times the first action flips as k runs over 0..n (diagnostic)."""
    prober = _Prober(policy, s0)
    picks = [prober.picks_a(CountingGoal.threshold(s, a, s_next, n, k, b)) for k in range(n + 1)]
    return sum(x != y for x, y in zip(picks, picks[1:]))


def extract_alg1(policy, s: int, a: int, s_next: int, n: int, b: int,
                 search: str = BINARY, s0: int = 0,
                 on_query: Optional[Callable] = None) -> Estimate:
    """Median-switching estimate from "at most k of n" versus "more than k of n" goals.

    ``k = n`` is never probed: at-most-n is certain, so every competent agent
    opens with ``a`` there. No switch below n therefore means p_hat = 1.
    """
    if a == b:
        raise ValueError("alternative action must differ from the probed action")
    if n < 1:
        raise ValueError("need at least one trial")
    prober = _Prober(policy, s0, on_query)
    k_star = smallest_switch(
        lambda k: prober.picks_a(CountingGoal.threshold(s, a, s_next, n, k, b)),
        0, n - 1, search)
    if k_star is None:
        return Estimate(1.0, n, n, queries=prober.count)
    if k_star == 0:
        return Estimate(0.0, 0, n, queries=prober.count)
    return Estimate((k_star - 0.5) / n, k_star, n, queries=prober.count)


def solve_power_balance(n: int, c: float) -> float:
    """Root of ``n log p = c log(1 - p)`` on (0, 1) by bisection; 1 when c = 0."""
    if c == 0:
        return 1.0
    def gap(p):
        return n * math.log(p) - c * math.log1p(-p)

    lo, hi = ROOT_LO, ROOT_HI
    if gap(lo) >= 0:
        return lo
    if gap(hi) <= 0:
        return hi
    while hi - lo > ROOT_TOL:
        mid = 0.5 * (lo + hi)
        if gap(mid) < 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def extract_alg2(policy, s: int, a: int, s_next: int, n: int, b: int,
                 search: str = BINARY, s0: int = 0,
                 on_query: Optional[Callable] = None) -> Estimate:
    """Estimate from "n straight successes" versus "k straight failures" goals.

    A single-trial probe picks the side. On the success side the smallest k
    at which ``a`` is preferred solves ``p^n = (1-p)^(k-1/2)``; on the failure
    side the smallest k at which ``b`` is preferred solves ``p^(k-1/2) = (1-p)^n``.
    The k = 0 probe on the success side and a zero-test goal on the failure
    side catch the deterministic cases p = 1 and p = 0 exactly.
    """
    if a == b:
        raise ValueError("alternative action must differ from the probed action")
    if n < 1:
        raise ValueError("need at least one trial")
    prober = _Prober(policy, s0, on_query)
    if prober.picks_a(CountingGoal.runs(s, a, s_next, 1, 1, b)):
        k_star = smallest_switch(
            lambda k: prober.picks_a(CountingGoal.runs(s, a, s_next, n, k, b)),
            0, n, search)
        if k_star is None or k_star == 0:
            return Estimate(1.0, 0 if k_star is None else k_star, n, "a", prober.count)
        return Estimate(solve_power_balance(n, k_star - 0.5), k_star, n, "a", prober.count)
    if prober.picks_a(CountingGoal.zero_test(s, a, s_next, b)):
        return Estimate(0.0, 0, n, "b", prober.count)
    k_star = smallest_switch(
        lambda k: not prober.picks_a(CountingGoal.runs(s, a, s_next, k, n, b)),
        1, n, search)
    if k_star is None:
        return Estimate(0.0, 0, n, "b", prober.count)
    # p^(k-1/2) = (1-p)^n  <=>  q^n = (1-q)^(k-1/2) with q = 1 - p
    return Estimate(1.0 - solve_power_balance(n, k_star - 0.5), k_star, n, "b", prober.count)


def _median_crossing(k: int, n: int) -> float:
    """The p at which "at most k of n" and "more than k of n" are equally likely."""
    if k >= n:
        return 1.0
    return float(brentq(lambda p: log_cdf(k, n, p) - log_sf(k, n, p), ROOT_LO, ROOT_HI,
                        xtol=ROOT_TOL))


def certified_interval(est: Estimate) -> tuple:
    """Every p an exact (zero-regret) agent could hold and still produce ``est``.

    Alg-1 estimates (no branch label) use the median crossings of the
    threshold goals; Alg-2 estimates use the power-balance roots of the run
    goals. The true p of an optimal agent always lies in this interval.
    """
    n, k = est.n, est.k_star
    if est.branch == "":
        lo = 0.0 if k == 0 else _median_crossing(k - 1, n)
        hi = 1.0 if k >= n else _median_crossing(k, n)
        return lo, hi
    if est.branch == "a":
        if k == 0:
            return 1.0, 1.0
        return solve_power_balance(n, k), solve_power_balance(n, k - 1)
    if k == 0:
        return 0.0, 0.0
    return 1.0 - solve_power_balance(n, k - 1), 1.0 - solve_power_balance(n, k)


def certified_error(est: Estimate) -> float:
    """Largest distance from ``est.p_hat`` to any p in its certified interval."""
    lo, hi = certified_interval(est)
    return max(est.p_hat - lo, hi - est.p_hat, 0.0)


def error_bound(p: float, depth: int, delta: float = 0.0) -> float:
    """Worst-case |p_hat - p| for an agent with regret ``delta`` on goals up to ``depth``."""
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must be a probability")
    if depth < 2:
        raise ValueError("depth must be at least 2")
    if delta >= 1.0:
        return 1.0
    return min(1.0, math.sqrt(2.0 * p * (1.0 - p) / ((depth - 1) * (1.0 - delta))))


def trials_bound(p: float, trials: int, delta: float = 0.0) -> float:
    """Same bound in terms of trial count (depth = 2 * trials + 1)."""
    return error_bound(p, 2 * trials + 1, delta)


def asymptotic_bound_terms(p: float, trials: int, delta: float) -> tuple:
    """``(regret term, 1/n term)`` of the large-n, small-delta error estimate."""
    regret_term = delta * math.sqrt(math.pi * p * (1.0 - p) / (8.0 * trials))
    resolution_term = (0.5 + math.sqrt(2.0 * math.pi)) / trials
    return regret_term, resolution_term


@dataclass
class ExtractionReport:
    estimates: np.ndarray
    switch_index: np.ndarray
    trials: int
    algorithm: str
    branch: np.ndarray
    truth: Optional[np.ndarray] = None
    delta: float = 0.0
    failures: list = field(default_factory=list)
    queries: int = 0

    @property
    def error(self) -> Optional[np.ndarray]:
        if self.truth is None:
            return None
        return np.abs(self.estimates - self.truth)

    @property
    def bound(self) -> Optional[np.ndarray]:
        if self.truth is None:
            return None
        return np.vectorize(lambda p: trials_bound(p, self.trials, self.delta))(self.truth)

    def error_values(self, support_only: bool = False) -> np.ndarray:
        err = self.error
        if err is None:
            raise ValueError("report has no ground truth")
        ok = np.isfinite(self.estimates)
        if support_only:
            ok &= self.truth > 0
        return err[ok]

    def mean_error(self, support_only: bool = False) -> float:
        return float(self.error_values(support_only).mean())

    def normalized(self) -> np.ndarray:
        """Rows projected back onto the simplex by L1 rescaling (uniform if all zero)."""
        est = np.nan_to_num(self.estimates, nan=0.0)
        tot = est.sum(axis=2, keepdims=True)
        n = est.shape[2]
        return np.where(tot > 0, est / np.where(tot > 0, tot, 1.0), 1.0 / n)

    def rows(self):
        S, A, _ = self.estimates.shape
        err, bnd = self.error, self.bound
        for s in range(S):
            for a in range(A):
                for s2 in range(S):
                    yield {
                        "s": s, "a": a, "s_next": s2,
                        "p_true": "" if self.truth is None else repr(float(self.truth[s, a, s2])),
                        "p_hat": repr(float(self.estimates[s, a, s2])),
                        "k_star": int(self.switch_index[s, a, s2]),
                        "n": self.trials,
                        "branch": self.branch[s, a, s2],
                        "bound": "" if bnd is None else repr(float(bnd[s, a, s2])),
                        "error": "" if err is None else repr(float(err[s, a, s2])),
                    }

    def save(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
            w.writeheader()
            w.writerows(self.rows())


def load_report(path, algorithm: str = "") -> ExtractionReport:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != REPORT_COLUMNS:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        rows = list(reader)
    if not rows:
        raise ValueError(f"{path}: empty report")
    S = max(int(r["s"]) for r in rows) + 1
    A = max(int(r["a"]) for r in rows) + 1
    est = np.full((S, A, S), np.nan)
    ks = np.zeros((S, A, S), dtype=np.int64)
    br = np.full((S, A, S), "", dtype=object)
    truth = None if rows[0]["p_true"] == "" else np.zeros((S, A, S))
    for r in rows:
        i = int(r["s"]), int(r["a"]), int(r["s_next"])
        est[i] = float(r["p_hat"])
        ks[i] = int(r["k_star"])
        br[i] = r["branch"]
        if truth is not None:
            truth[i] = float(r["p_true"])
    return ExtractionReport(est, ks, int(rows[0]["n"]), algorithm, br, truth)


_EXTRACTORS = {ALG1: extract_alg1, ALG2: extract_alg2}


def extract_full_model(policy, n_states: int, n_actions: int, n: int,
                       algorithm: str = ALG2, search: str = BINARY, s0: int = 0,
                       truth: Optional[Cmp] = None, delta: float = 0.0,
                       on_query: Optional[Callable] = None) -> ExtractionReport:
    """Run the chosen extractor on every ``(s, a, s')``; per-transition failures are
    recorded (estimate NaN) and the sweep carries on."""
    extractor = _EXTRACTORS[algorithm]
    est = np.full((n_states, n_actions, n_states), np.nan)
    ks = np.zeros(est.shape, dtype=np.int64)
    br = np.full(est.shape, "", dtype=object)
    failures = []
    queries = 0
    for s in range(n_states):
        for a in range(n_actions):
            b = (a + 1) % n_actions
            for s2 in range(n_states):
                try:
                    e = extractor(policy, s, a, s2, n, b, search=search, s0=s0, on_query=on_query)
                except Exception as exc:  # noqa: BLE001 - reported per transition
                    failures.append(((s, a, s2), f"{type(exc).__name__}: {exc}"))
                    continue
                est[s, a, s2] = e.p_hat
                ks[s, a, s2] = e.k_star
                br[s, a, s2] = e.branch
                queries += e.queries
    return ExtractionReport(est, ks, n, algorithm, br,
                            None if truth is None else np.array(truth.transitions),
                            delta, failures, queries)


@dataclass(frozen=True)
class MyopicDemoReport:
    n_states: int
    n_actions: int
    probability_gap: float
    queries: int
    agreements: int
    family_values: tuple
    compatible_interval: tuple

    @property
    def agreement_fraction(self) -> float:
        return self.agreements / self.queries

    @property
    def certified_error(self) -> float:
        """Smallest error bound any myopic-only extractor can certify."""
        lo, hi = self.compatible_interval
        return hi - lo


def _ring_env(q: float, n_states: int, n_actions: int) -> Cmp:
    rows = np.zeros((n_states, n_states))
    for s in range(n_states):
        rows[s, (s + 1) % n_states] += q
        rows[s, (s + 2) % n_states] += 1.0 - q
    return from_rows(rows, n_actions)


def myopic_nonidentifiability_demo(seed: int = 0, n_states: int = 3, n_actions: int = 2,
                                   q_pair=(0.2, 0.6), family_size: int = 9) -> MyopicDemoReport:
    """Action-independent ring processes share one optimal myopic policy whatever
    their transition values, so that policy pins no transition probability down.

    ``q`` is the probability of stepping to ``s+1`` (else ``s+2``). The two envs
    in ``q_pair`` are compared query by query; a seeded family of further ``q``
    values (plus 0 and 1) shows the compatible range of ``P(s+1 | s)``.
    """
    if n_states > 4:
        raise ValueError("exhaustive subset enumeration is limited to 4 states")
    env1, env2 = (_ring_env(q, n_states, n_actions) for q in q_pair)
    t1 = MyopicAgent(env1).table()
    agent2 = MyopicAgent(env2)
    agree = sum(agent2.act(Trajectory([s0]), myopic_goal(y)) == act
                for (s0, y), act in t1.best.items())

    rng = np.random.default_rng(seed)
    family = sorted({0.0, 1.0, *q_pair, *map(float, rng.random(family_size))})
    compatible = []
    for q in family:
        env = _ring_env(q, n_states, n_actions)
        if is_communicating(env) and MyopicAgent(env).table().best == t1.best:
            compatible.append(q)

    gap = float(np.max(np.abs(env1.transitions - env2.transitions)))
    return MyopicDemoReport(n_states, n_actions, gap, len(t1.best), agree,
                            tuple(compatible), (min(compatible), max(compatible)))
