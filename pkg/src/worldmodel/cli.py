"""Command-line entry point: one subcommand per pipeline stage."""

from __future__ import annotations

import argparse
import csv
import hashlib
import itertools
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import __version__
from .agents import (
    load_agent_model,
    model_based_agent,
    optimal_agent,
    save_agent_model,
    train_from_trajectory,
    uniform_model,
)
from .cmp import (
    NotCommunicatingError,
    Trajectory,
    hitting_probabilities,
    induced_chain,
    is_communicating,
    load_cmp,
    random_cmp,
    reach_policy,
    sample_trajectory,
    save_cmp,
)
from .evaluation import RegretMeter, regret
from .extraction import (
    ALG1,
    ALG2,
    BINARY,
    LINEAR,
    CompetenceViolation,
    extract_alg1,
    extract_full_model,
    myopic_nonidentifiability_demo,
)
from .goals import (
    CountingGoal,
    expand_counting_goal,
    format_goal,
    parse_goal,
    satisfies_composite,
    satisfies_counting,
)
from .sweep import (
    SweepConfig,
    compute_fits,
    depth_to_trials,
    load_sweep,
    run_sweep,
    write_report,
    write_sweep,
)

EXIT_OK, EXIT_USAGE, EXIT_INVARIANT, EXIT_PARTIAL = 0, 1, 2, 3
log = logging.getLogger("worldmodel")


class UsageError(Exception):
    pass


class InvariantViolation(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(out, command: str, args: argparse.Namespace, inputs=(), seeds=None,
                   extra=None) -> Path:
    out = Path(out)
    doc = {
        "tool": "worldmodel",
        "version": __version__,
        "command": command,
        "arguments": {k: v for k, v in sorted(vars(args).items())
                      if k not in ("func", "verbose") and v is not None},
        "inputs": {str(p): file_digest(p) for p in inputs},
        "outputs": {str(out): file_digest(out)},
        "seeds": seeds or {},
    }
    if extra:
        doc.update(extra)
    path = out.with_name(out.name + ".manifest.json")
    path.write_text(json.dumps(doc, indent=1, sort_keys=True, default=str))
    return path


def _trials(args) -> int:
    if args.trials is not None:
        return args.trials
    if args.depth is None:
        raise UsageError("give --depth or --trials")
    n = depth_to_trials(args.depth)
    if n < 1:
        raise UsageError(f"depth {args.depth} is too shallow (need at least 3)")
    return n


def _agent(args, env):
    if args.model:
        model = load_agent_model(args.model)
        if env is not None and model.transitions.shape != env.transitions.shape:
            raise UsageError(f"model shape {model.transitions.shape} does not match env "
                             f"{env.transitions.shape}")
        return model_based_agent(model), model
    if env is None:
        raise UsageError("the optimal agent needs --env")
    return optimal_agent(env), None


# ---------------------------------------------------------------- subcommands

def cmd_gen_env(args) -> int:
    env = random_cmp(args.states, args.actions, args.max_outcomes, args.seed,
                     outcome_count=args.outcome_count)
    save_cmp(env, args.out)
    write_manifest(args.out, "gen-env", args, seeds={"env": args.seed},
                   extra={"digest": env.digest()})
    print(f"wrote {args.out} ({env.n_states} states, {env.n_actions} actions, digest {env.digest()[:12]})")
    return EXIT_OK


def cmd_train(args) -> int:
    env = load_cmp(args.env)
    if args.samples < 0:
        raise UsageError("--samples must be non-negative")
    if args.samples == 0:
        model = uniform_model(env.n_states, env.n_actions)
    else:
        traj = sample_trajectory(env, None, args.s0, args.samples, args.seed)
        model = train_from_trajectory(traj, env.n_states, env.n_actions)
    model.manifest.update(env_digest=env.digest(), seed=args.seed, n_samples=args.samples)
    save_agent_model(model, args.out)
    write_manifest(args.out, "train", args, inputs=[args.env], seeds={"trajectory": args.seed})
    print(f"wrote {args.out} (trained on {args.samples} transitions)")
    return EXIT_OK


def cmd_extract(args) -> int:
    env = load_cmp(args.env) if args.env else None
    agent, _ = _agent(args, env)
    n = _trials(args)
    shape = (agent.n_states, agent.n_actions)
    rep = extract_full_model(agent, *shape, n, algorithm=args.alg, search=args.search,
                             s0=args.s0, truth=env)
    rep.save(args.out)
    inputs = [p for p in (args.env, args.model) if p]
    write_manifest(args.out, "extract", args, inputs=inputs,
                   extra={"trials": n, "probe_depth": 2 * n + 1, "queries": rep.queries})
    print(f"wrote {args.out}: {rep.queries} queries, trials={n}, probe depth={2 * n + 1}")
    if rep.failures:
        for key, msg in rep.failures[:5]:
            log.error("transition %s failed: %s", key, msg)
        raise InvariantViolation(f"{len(rep.failures)} transitions failed")
    if env is not None:
        err, bnd = rep.error, rep.bound
        print(f"mean error {rep.mean_error():.4f} (support {rep.mean_error(True):.4f})")
        if not args.model:
            over = int(np.sum(err > bnd + 1e-12))
            print(f"bound violations at delta=0: {over}")
            if over and args.check_bound:
                raise InvariantViolation(f"{over} estimates exceed the error bound")
    return EXIT_OK


REGRET_COLUMNS = ("n_samples", "depth", "seed", "goal", "p_agent", "p_opt", "delta")


def cmd_regret(args) -> int:
    env = load_cmp(args.env)
    agent, model = _agent(args, env)
    meta = model.manifest if model is not None else {}
    if args.goal:
        goals = [parse_goal(g) for g in args.goal]
        bad = [g for g in goals if not isinstance(g, CountingGoal)]
        if bad:
            raise UsageError("regret is defined here for counting goals only")
        records = [regret(env, agent, g, args.s0) for g in goals]
    else:
        n = _trials(args)
        meter = RegretMeter(env, agent, args.s0)
        extract_full_model(agent, env.n_states, env.n_actions, n, algorithm=args.alg,
                           search=args.search, s0=args.s0, on_query=meter)
        records = meter.records
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REGRET_COLUMNS)
        for r in records:
            w.writerow([meta.get("n_samples", ""), r.goal.depth, meta.get("seed", ""),
                        format_goal(r.goal), repr(r.p_agent), repr(r.p_opt), repr(r.delta)])
    write_manifest(args.out, "regret", args, inputs=[p for p in (args.env, args.model) if p])
    deltas = np.array([r.delta for r in records])
    print(f"wrote {args.out}: {len(records)} goals, mean regret {deltas.mean():.4f}, "
          f"max {deltas.max():.4f}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = SweepConfig.from_file(args.config) if args.config else SweepConfig()
    overrides = {k: getattr(args, k) for k in ("seeds", "samples", "depths", "jobs", "env_seed")
                 if getattr(args, k) is not None}
    if args.env_per_seed:
        overrides["env_per_seed"] = True
    cfg = SweepConfig(**{**asdict(cfg), **overrides})
    result = run_sweep(cfg)
    write_sweep(result, args.out)
    print(f"wrote {args.out}: {len(result.cells)} cells, config {cfg.digest()}")
    if result.failed:
        print(f"{len(result.failed)} cells failed or were partial", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


def _merge_sweeps(dirs):
    results = []
    for d in dirs:
        try:
            results.append(load_sweep(d))
        except FileNotFoundError as exc:
            raise UsageError(str(exc)) from None
        except ValueError as exc:
            raise UsageError(f"refusing mixed or malformed input: {exc}") from None
    base = results[0]
    key = {k: v for k, v in base.config.to_dict().items() if k not in ("samples", "jobs")}
    cells, samples = list(base.cells), list(base.config.samples)
    for r in results[1:]:
        other = {k: v for k, v in r.config.to_dict().items() if k not in ("samples", "jobs")}
        if other != key or r.env_digest != base.env_digest:
            raise UsageError("refusing to mix sweeps with different environments or grids")
        if set(r.config.samples) & set(samples):
            raise UsageError("sweeps overlap in their sample sizes")
        cells += r.cells
        samples += list(r.config.samples)
    if len(results) == 1:
        return base
    merged = replace(base, config=replace(base.config, samples=tuple(sorted(samples))),
                     cells=sorted(cells, key=lambda c: (c["n_samples"], c["depth"], c["seed"])))
    merged.fits = compute_fits(merged)
    return merged


def cmd_report(args) -> int:
    result = _merge_sweeps(args.sweep)
    slopes = write_report(result, args.out, regret_depth=args.regret_depth)
    for name in ("error_vs_nmax", "error_vs_regret"):
        if name in slopes:
            print(f"{name}: slope {slopes[name]['slope']:.3f}")
    for n, s in slopes["error_vs_depth"].items():
        print(f"error_vs_depth N={n}: slope {s['slope']:.3f}")
    return EXIT_OK


def cmd_myopic_demo(args) -> int:
    rep = myopic_nonidentifiability_demo(seed=args.seed, n_states=args.states,
                                         n_actions=args.actions)
    doc = {
        "queries": rep.queries,
        "agreements": rep.agreements,
        "agreement_fraction": rep.agreement_fraction,
        "probability_gap": rep.probability_gap,
        "compatible_values": list(rep.compatible_interval),
        "family": list(rep.family_values),
        "certified_error": rep.certified_error,
    }
    print(json.dumps(doc, indent=1))
    if args.out:
        Path(args.out).write_text(json.dumps(doc, indent=1))
        write_manifest(args.out, "myopic-demo", args, seeds={"family": args.seed})
    if rep.agreements != rep.queries:
        raise InvariantViolation("myopic policies disagree on some query")
    return EXIT_OK


def _verify_checks(n_envs: int, seed: int):
    rng = np.random.default_rng(seed)
    for i in range(n_envs):
        S, A = int(rng.integers(2, 8)), int(rng.integers(2, 4))
        env = random_cmp(S, A, int(rng.integers(1, S + 1)), int(rng.integers(2**31)))
        if not is_communicating(env):
            yield f"env {i}: not communicating"
        for t in range(S):
            h = hitting_probabilities(induced_chain(env, reach_policy(env, t)), t)
            if np.max(np.abs(h - 1)) > 1e-9:
                yield f"env {i}: reach policy to {t} misses with probability {1 - h.min():.3g}"
        agent = optimal_agent(env)
        for s in range(S):
            for a in range(A):
                for s2 in range(S):
                    p = env.transitions[s, a, s2]
                    e = extract_alg1(agent, s, a, s2, 10, (a + 1) % A)
                    if abs(e.p_hat - p) > np.sqrt(p * (1 - p) / 10) + 1e-12:
                        yield f"env {i}: estimate {e.p_hat:.4f} vs {p:.4f} exceeds bound at {(s, a, s2)}"
    # counting goal against its expansion on a tiny exhaustive case
    for kind in ("threshold", "runs"):
        cg = (CountingGoal.threshold(0, 1, 1, 2, 0, 0) if kind == "threshold"
              else CountingGoal.runs(0, 1, 1, 2, 1, 0))
        comp = expand_counting_goal(cg)
        for L in range(1, 6):
            for states in itertools.product(range(2), repeat=L + 1):
                for acts in itertools.product(range(2), repeat=L):
                    tr = Trajectory(list(states), list(acts))
                    if satisfies_counting(tr, cg) != satisfies_composite(tr, comp):
                        yield f"counting goal {cg} disagrees with its expansion on {tr}"


def cmd_verify(args) -> int:
    problems = list(_verify_checks(args.envs, args.seed))
    for p in problems:
        print("FAIL", p)
    if problems:
        raise InvariantViolation(f"{len(problems)} invariant violations")
    print(f"all invariants hold ({args.envs} random envs)")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def _int_list(text: str):
    try:
        return tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="worldmodel", description="World-model extraction from goal-conditioned agents.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-env", help="draw a random communicating process")
    g.add_argument("--states", type=int, default=20)
    g.add_argument("--actions", type=int, default=5)
    g.add_argument("--max-outcomes", type=int, default=5)
    g.add_argument("--outcome-count", choices=("exact", "uniform"), default="exact")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_env)

    t = sub.add_parser("train", help="fit a frequency model on random-policy experience")
    t.add_argument("--env", required=True)
    t.add_argument("--samples", type=int, required=True)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--s0", type=int, default=0)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    def probe_args(q):
        q.add_argument("--env")
        q.add_argument("--model", help="agent model file; omit for the optimal agent")
        q.add_argument("--alg", type=lambda x: {"1": ALG1, "2": ALG2}.get(x, x),
                       choices=(ALG1, ALG2), default=ALG2)
        q.add_argument("--depth", type=int)
        q.add_argument("--trials", type=int)
        q.add_argument("--search", choices=(BINARY, LINEAR), default=BINARY)
        q.add_argument("--s0", type=int, default=0)
        q.add_argument("--out", required=True)

    e = sub.add_parser("extract", help="recover transition estimates from policy queries")
    probe_args(e)
    e.add_argument("--check-bound", action="store_true",
                   help="exit 2 if an optimal agent's estimate exceeds the error bound")
    e.set_defaults(func=cmd_extract)

    r = sub.add_parser("regret", help="exact regret of an agent on counting goals")
    probe_args(r)
    r.add_argument("--goal", action="append", help="counting goal in text form (repeatable)")
    r.set_defaults(func=cmd_regret)

    w = sub.add_parser("sweep", help="run the samples x depth x seed grid")
    w.add_argument("--config", help="JSON file with SweepConfig fields")
    w.add_argument("--seeds", type=int)
    w.add_argument("--samples", type=_int_list)
    w.add_argument("--depths", type=_int_list)
    w.add_argument("--env-seed", type=int)
    w.add_argument("--env-per-seed", action="store_true")
    w.add_argument("--jobs", type=int)
    w.add_argument("--out", required=True)
    w.set_defaults(func=cmd_sweep)

    rp = sub.add_parser("report", help="plot-ready series and slopes from sweep output")
    rp.add_argument("--sweep", nargs="+", required=True)
    rp.add_argument("--regret-depth", type=int, default=50)
    rp.add_argument("--out", required=True)
    rp.set_defaults(func=cmd_report)

    m = sub.add_parser("myopic-demo", help="myopic agents cannot pin down transitions")
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--states", type=int, default=3)
    m.add_argument("--actions", type=int, default=2)
    m.add_argument("--out")
    m.set_defaults(func=cmd_myopic_demo)

    v = sub.add_parser("verify", help="run the invariant checks on random instances")
    v.add_argument("--envs", type=int, default=10)
    v.add_argument("--seed", type=int, default=0)
    v.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # --help, --version and usage errors
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (InvariantViolation, NotCommunicatingError, CompetenceViolation) as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except (UsageError, FileNotFoundError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
