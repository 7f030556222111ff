"""Sequential/composite temporal goals and the counting-goal family.

Satisfaction is evaluated on finite prefixes with three-valued verdicts:
``UNKNOWN`` means the prefix ended while an obligation was still pending.
"""

from __future__ import annotations

import enum
import itertools
import re
from dataclasses import dataclass
from math import comb
from typing import Iterator, Optional, Union

from .cmp import Trajectory

MAX_EXPANSION_TRIALS = 12


class TemporalOp(enum.Enum):
    NOW = "now"
    NEXT = "next"
    EVENTUALLY = "ev"


class Verdict(enum.Enum):
    TRUE = "true"
    FALSE = "false"
    UNKNOWN = "unknown"

    @classmethod
    def of(cls, value: Optional[bool]) -> "Verdict":
        if value is None:
            return cls.UNKNOWN
        return cls.TRUE if value else cls.FALSE


@dataclass(frozen=True)
class SubGoal:
    """``op([(s, a) in goal_set])``.

    ``goal_set`` holds ``(state, action)`` atoms where ``None`` is a wildcard.
    ``negated`` flips membership, so ``S != 3`` is ``{(3, None)}`` negated.
    """

    op: TemporalOp
    goal_set: frozenset
    negated: bool = False

    def __post_init__(self):
        if not self.goal_set:
            raise ValueError("goal set must be nonempty")
        object.__setattr__(self, "goal_set", frozenset(
            (None if s is None else int(s), None if a is None else int(a))
            for s, a in self.goal_set))

    @classmethod
    def make(cls, op: TemporalOp, state: Optional[int] = None,
             action: Optional[int] = None, negated: bool = False) -> "SubGoal":
        if state is None and action is None:
            raise ValueError("a single-atom goal needs a state or an action")
        return cls(op, frozenset([(state, action)]), negated)

    def contains(self, state: int, action: Optional[int]) -> Optional[bool]:
        """Membership of ``(state, action)``; ``None`` if it hinges on a missing action."""
        hit = False
        undecided = False
        for gs, ga in self.goal_set:
            if gs is not None and gs != state:
                continue
            if ga is None:
                hit = True
                break
            if action is None:
                undecided = True
            elif ga == action:
                hit = True
                break
        if not hit and undecided:
            return None
        return hit != self.negated

    def needs_action(self) -> bool:
        return any(a is not None for _, a in self.goal_set)


@dataclass(frozen=True)
class SequentialGoal:
    subgoals: tuple

    def __post_init__(self):
        if not self.subgoals:
            raise ValueError("a sequential goal needs at least one sub-goal")
        object.__setattr__(self, "subgoals", tuple(self.subgoals))

    @property
    def depth(self) -> int:
        return len(self.subgoals)


@dataclass(frozen=True)
class CompositeGoal:
    branches: tuple

    def __post_init__(self):
        if not self.branches:
            raise ValueError("a composite goal needs at least one branch")
        object.__setattr__(self, "branches", tuple(self.branches))

    @property
    def depth(self) -> int:
        return max(b.depth for b in self.branches)


class Predicate(enum.Enum):
    AT_MOST = "atmost"
    MORE_THAN = "morethan"
    ALL_SUCCEED = "allsucceed"
    ALL_FAIL = "allfail"


@dataclass(frozen=True)
class Branch:
    """One side of a counting goal: first action, trial count and success predicate."""

    first_action: int
    predicate: Predicate
    trials: int
    k: int = 0

    def __post_init__(self):
        if self.trials < 0:
            raise ValueError("trials must be non-negative")
        if self.predicate in (Predicate.AT_MOST, Predicate.MORE_THAN):
            if not 0 <= self.k <= self.trials:
                raise ValueError(f"threshold k={self.k} outside [0, {self.trials}]")

    def accepts(self, successes: int) -> bool:
        p, n = self.predicate, self.trials
        if p is Predicate.AT_MOST:
            return successes <= self.k
        if p is Predicate.MORE_THAN:
            return successes > self.k
        if p is Predicate.ALL_SUCCEED:
            return successes == n
        return successes == 0

    def still_possible(self, successes: int, done: int) -> bool:
        p = self.predicate
        if p is Predicate.AT_MOST:
            return successes <= self.k
        if p is Predicate.MORE_THAN:
            return successes + self.trials - done > self.k
        if p is Predicate.ALL_SUCCEED:
            return successes == done
        return successes == 0

    def success_counts(self) -> range:
        p, n = self.predicate, self.trials
        if p is Predicate.AT_MOST:
            return range(0, self.k + 1)
        if p is Predicate.MORE_THAN:
            return range(self.k + 1, n + 1)
        if p is Predicate.ALL_SUCCEED:
            return range(n, n + 1)
        return range(0, 1)


@dataclass(frozen=True)
class CountingGoal:
    """Disjunction of two branches probing the transition ``(state, action) -> outcome``.

    Each branch opens with its own first action, then repeats "eventually
    take ``action`` in ``state``; next state is / is not ``outcome``" for its
    trial count, and succeeds when its predicate accepts the success count.
    """

    state: int
    action: int
    outcome: int
    branch_a: Branch
    branch_b: Branch

    def __post_init__(self):
        if self.branch_a.first_action == self.branch_b.first_action:
            raise ValueError("the two branches need distinct first actions")

    @classmethod
    def threshold(cls, s: int, a: int, s_next: int, n: int, k: int,
                  b: int, first: Optional[int] = None) -> "CountingGoal":
        """Branch ``first`` (default ``a``) wins with at most k of n successes, ``b`` with more."""
        first = a if first is None else first
        return cls(s, a, s_next,
                   Branch(first, Predicate.AT_MOST, n, k),
                   Branch(b, Predicate.MORE_THAN, n, k))

    @classmethod
    def runs(cls, s: int, a: int, s_next: int, n_success: int, n_fail: int,
             b: int, first: Optional[int] = None) -> "CountingGoal":
        """Branch ``first`` wins with ``n_success`` straight successes, ``b`` with ``n_fail`` straight failures."""
        first = a if first is None else first
        return cls(s, a, s_next,
                   Branch(first, Predicate.ALL_SUCCEED, n_success),
                   Branch(b, Predicate.ALL_FAIL, n_fail))

    @classmethod
    def zero_test(cls, s: int, a: int, s_next: int, b: int, trials: int = 1) -> "CountingGoal":
        """``a`` then ``trials`` straight failures, against a bare opening move ``b``.

        Both branches are certain exactly when the transition is impossible, so
        under first-branch tie-breaking only a zero probability selects ``a``.
        """
        return cls(s, a, s_next,
                   Branch(a, Predicate.ALL_FAIL, trials),
                   Branch(b, Predicate.ALL_SUCCEED, 0))

    @property
    def branches(self) -> tuple:
        return (self.branch_a, self.branch_b)

    @property
    def depth(self) -> int:
        return 2 * max(self.branch_a.trials, self.branch_b.trials) + 1


AnyGoal = Union[SequentialGoal, CompositeGoal, CountingGoal]


def _action_at(traj: Trajectory, t: int) -> Optional[int]:
    return traj.actions[t] if t < len(traj.actions) else None


def _match(traj: Trajectory, sub: SubGoal, t: int) -> Optional[bool]:
    return sub.contains(traj.states[t], _action_at(traj, t))


def satisfies_sequential(traj: Trajectory, goal: SequentialGoal) -> Verdict:
    t = 0
    n_states = len(traj.states)
    for sub in goal.subgoals:
        if sub.op is TemporalOp.NEXT:
            t += 1
        if t >= n_states:
            return Verdict.UNKNOWN
        if sub.op is TemporalOp.EVENTUALLY:
            # until: the first entry into the goal set must be the one that works
            while True:
                if t >= n_states:
                    return Verdict.UNKNOWN
                m = _match(traj, sub, t)
                if m is None:
                    return Verdict.UNKNOWN
                if m:
                    break
                t += 1
        else:
            m = _match(traj, sub, t)
            if m is None:
                return Verdict.UNKNOWN
            if not m:
                return Verdict.FALSE
    return Verdict.TRUE


def any_of(verdicts) -> Verdict:
    seen_unknown = False
    for v in verdicts:
        if v is Verdict.TRUE:
            return Verdict.TRUE
        if v is Verdict.UNKNOWN:
            seen_unknown = True
    return Verdict.UNKNOWN if seen_unknown else Verdict.FALSE


def satisfies_composite(traj: Trajectory, goal: CompositeGoal) -> Verdict:
    return any_of(satisfies_sequential(traj, b) for b in goal.branches)


def satisfies_counting(traj: Trajectory, cg: CountingGoal) -> Verdict:
    """Single pass over the trajectory, equivalent to the expanded disjunction."""
    a0 = _action_at(traj, 0)
    if a0 is None:
        return Verdict.UNKNOWN
    if a0 == cg.branch_a.first_action:
        branch = cg.branch_a
    elif a0 == cg.branch_b.first_action:
        branch = cg.branch_b
    else:
        return Verdict.FALSE

    states, n_states = traj.states, len(traj.states)
    successes = done = 0
    t = 0
    while done < branch.trials:
        if not branch.still_possible(successes, done):
            return Verdict.FALSE
        while True:
            if t >= n_states:
                return Verdict.UNKNOWN
            if states[t] == cg.state:
                act = _action_at(traj, t)
                if act is None:
                    return Verdict.UNKNOWN
                if act == cg.action:
                    break
            t += 1
        t += 1
        if t >= n_states:
            return Verdict.UNKNOWN
        successes += states[t] == cg.outcome
        done += 1
    return Verdict.of(branch.accepts(successes))


def evaluate(traj: Trajectory, goal: AnyGoal) -> Verdict:
    if isinstance(goal, CountingGoal):
        return satisfies_counting(traj, goal)
    if isinstance(goal, CompositeGoal):
        return satisfies_composite(traj, goal)
    return satisfies_sequential(traj, goal)


def _branch_sequences(cg: CountingGoal, branch: Branch) -> Iterator[SequentialGoal]:
    opener = SubGoal.make(TemporalOp.NOW, action=branch.first_action)
    reach = SubGoal.make(TemporalOp.EVENTUALLY, cg.state, cg.action)
    hit = SubGoal.make(TemporalOp.NEXT, cg.outcome)
    miss = SubGoal.make(TemporalOp.NEXT, cg.outcome, negated=True)
    n = branch.trials
    for r in branch.success_counts():
        for where in itertools.combinations(range(n), r):
            chosen = set(where)
            body = []
            for i in range(n):
                body += [reach, hit if i in chosen else miss]
            yield SequentialGoal((opener, *body))


def expand_branch(cg: CountingGoal, branch: Branch) -> list:
    if branch.trials > MAX_EXPANSION_TRIALS:
        raise ValueError(f"refusing to expand more than {MAX_EXPANSION_TRIALS} trials")
    return list(_branch_sequences(cg, branch))


def expand_counting_goal(cg: CountingGoal) -> CompositeGoal:
    """Explicit disjunction over every success/failure ordering the predicates allow."""
    return CompositeGoal(tuple(expand_branch(cg, cg.branch_a) + expand_branch(cg, cg.branch_b)))


def expansion_size(cg: CountingGoal) -> int:
    return sum(comb(b.trials, r) for b in cg.branches for r in b.success_counts())


def goal_depth(goal: AnyGoal) -> int:
    return goal.depth


def myopic_target_set(goal: Union[SequentialGoal, CompositeGoal], n_states: int) -> frozenset:
    """States ``y`` of a goal ``next([S in y])``; raises for anything else."""
    branches = goal.branches if isinstance(goal, CompositeGoal) else (goal,)
    states = set()
    for seq in branches:
        if seq.depth != 1 or seq.subgoals[0].op is not TemporalOp.NEXT:
            raise ValueError("not a myopic goal: expected a single Next sub-goal")
        sub = seq.subgoals[0]
        if sub.needs_action():
            raise ValueError("myopic goals may only constrain the next state")
        states.update(s for s in range(n_states) if sub.contains(s, None))
    if not states:
        raise ValueError("myopic goal has an empty target set")
    return frozenset(states)


def myopic_goal(states) -> SequentialGoal:
    return SequentialGoal((SubGoal(TemporalOp.NEXT, frozenset((s, None) for s in states)),))


# -- canonical text form ---------------------------------------------------

def _format_atom(state, action) -> str:
    parts = []
    if state is not None:
        parts.append(f"S={state}")
    if action is not None:
        parts.append(f"A={action}")
    return ",".join(parts)


def format_subgoal(sub: SubGoal) -> str:
    atoms = sorted(sub.goal_set, key=lambda x: (x[0] is None, x[0] or 0, x[1] is None, x[1] or 0))
    if sub.negated and len(atoms) == 1 and atoms[0][1] is None:
        body = f"S!={atoms[0][0]}"
    else:
        body = "|".join(_format_atom(*x) for x in atoms)
        if sub.negated:
            body = f"!({body})"
    return f"{sub.op.value}({body})"


def _format_branch(br: Branch) -> str:
    if br.predicate in (Predicate.AT_MOST, Predicate.MORE_THAN):
        return f"{br.predicate.value}:{br.trials}:{br.k}"
    return f"{br.predicate.value}:{br.trials}"


def _parse_branch(first: int, text: str) -> Branch:
    parts = text.split(":")
    pred = Predicate(parts[0])
    return Branch(first, pred, *(int(x) for x in parts[1:]))


def format_goal(goal: AnyGoal) -> str:
    if isinstance(goal, CountingGoal):
        ba, bb = goal.branch_a, goal.branch_b
        head = f"count[a={ba.first_action},b={bb.first_action},s={goal.state},a'={goal.action},s'={goal.outcome}"
        if ba.predicate is Predicate.AT_MOST and bb.predicate is Predicate.MORE_THAN \
                and ba.trials == bb.trials and ba.k == bb.k:
            return f"{head},n={ba.trials},atmost={ba.k}]"
        if ba.predicate is Predicate.ALL_SUCCEED and bb.predicate is Predicate.ALL_FAIL:
            return f"{head},succ={ba.trials},fail={bb.trials}]"
        return f"{head},A={_format_branch(ba)},B={_format_branch(bb)}]"
    if isinstance(goal, CompositeGoal):
        return " || ".join(format_goal(b) for b in goal.branches)
    return "seq[ " + "; ".join(format_subgoal(s) for s in goal.subgoals) + " ]"


_SUB_RE = re.compile(r"^(now|next|ev)\((.*)\)$")


def _parse_atom(text: str):
    state = action = None
    for part in text.split(","):
        key, _, val = part.strip().partition("=")
        key = key.strip()
        if key == "S":
            state = int(val)
        elif key == "A":
            action = int(val)
        else:
            raise ValueError(f"bad goal atom {text!r}")
    if state is None and action is None:
        raise ValueError(f"empty goal atom {text!r}")
    return state, action


def parse_subgoal(text: str) -> SubGoal:
    m = _SUB_RE.match(text.strip())
    if not m:
        raise ValueError(f"bad sub-goal {text!r}")
    op = TemporalOp(m.group(1))
    body = m.group(2).strip()
    negated = False
    if body.startswith("S!="):
        return SubGoal(op, frozenset([(int(body[3:]), None)]), negated=True)
    if body.startswith("!(") and body.endswith(")"):
        negated, body = True, body[2:-1]
    atoms = frozenset(_parse_atom(x) for x in body.split("|"))
    return SubGoal(op, atoms, negated)


def _parse_count(text: str) -> CountingGoal:
    fields = {}
    for part in text.split(","):
        key, _, val = part.partition("=")
        key, val = key.strip(), val.strip()
        fields[key] = val if key in ("A", "B") else int(val)
    try:
        a, b, s, probe, s_next = (fields.pop(k) for k in ("a", "b", "s", "a'", "s'"))
    except KeyError as exc:
        raise ValueError(f"counting goal missing field {exc}") from None
    if set(fields) == {"n", "atmost"}:
        return CountingGoal.threshold(s, probe, s_next, fields["n"], fields["atmost"], b, first=a)
    if set(fields) == {"succ", "fail"}:
        return CountingGoal.runs(s, probe, s_next, fields["succ"], fields["fail"], b, first=a)
    if set(fields) == {"A", "B"}:
        return CountingGoal(s, probe, s_next, _parse_branch(a, fields["A"]), _parse_branch(b, fields["B"]))
    raise ValueError(f"unrecognised counting-goal fields {sorted(fields)}")


def parse_goal(text: str) -> AnyGoal:
    text = text.strip()
    if text.startswith("count[") and text.endswith("]"):
        return _parse_count(text[6:-1])
    parts = [p.strip() for p in text.split("||")]
    seqs = []
    for part in parts:
        if not (part.startswith("seq[") and part.endswith("]")):
            raise ValueError(f"bad sequential goal {part!r}")
        inner = part[4:-1].strip()
        seqs.append(SequentialGoal(tuple(parse_subgoal(x) for x in inner.split(";"))))
    return seqs[0] if len(seqs) == 1 else CompositeGoal(tuple(seqs))
