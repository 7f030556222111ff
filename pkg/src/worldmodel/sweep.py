"""Grid experiments: train agents on random-policy experience, extract, score."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .agents import model_based_agent, train_from_trajectory
from .cmp import Cmp, random_cmp, sample_trajectory
from .evaluation import RegretMeter
from .extraction import ALG2, BINARY, extract_full_model

log = logging.getLogger(__name__)

DEFAULT_SAMPLES = (500, 1000, 2000, 3000, 4000, 5000, 6000, 7000, 8000, 9000, 10000)
DEFAULT_DEPTHS = (10, 20, 50, 75, 100, 200, 300, 400, 500, 600)
CELL_COLUMNS = ("n_samples", "depth", "probe_depth", "trials", "seed", "status",
                "eps_all", "eps_support", "delta_mean", "delta_max", "queries", "failures")
REGRET_TARGET = 0.04
Z95 = 1.959963984540054


@dataclass
class SweepConfig:
    n_states: int = 20
    n_actions: int = 5
    max_outcomes: int = 5
    outcome_count: str = "uniform"
    env_seed: int = 0
    samples: tuple = DEFAULT_SAMPLES
    depths: tuple = DEFAULT_DEPTHS
    seeds: int = 10
    algorithm: str = ALG2
    search: str = BINARY
    start_state: int = 0
    env_per_seed: bool = False
    regret_weighting: str = "query"
    jobs: int = 1

    def __post_init__(self):
        self.samples = tuple(int(x) for x in self.samples)
        self.depths = tuple(int(x) for x in self.depths)
        if not self.samples or not self.depths:
            raise ValueError("sample and depth grids must be nonempty")
        if self.regret_weighting not in ("query", "transition"):
            raise ValueError("regret_weighting must be 'query' or 'transition'")
        if self.seeds < 1:
            raise ValueError("need at least one seed")
        for d in self.depths:
            if depth_to_trials(d) < 1:
                raise ValueError(f"depth {d} is too shallow for a single trial")

    @classmethod
    def from_file(cls, path) -> "SweepConfig":
        doc = json.loads(Path(path).read_text())
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**doc)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["samples"], d["depths"] = list(self.samples), list(self.depths)
        return d

    def digest(self) -> str:
        d = self.to_dict()
        d.pop("jobs")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def depth_to_trials(depth: int) -> int:
    """Largest trial count whose goal depth ``2n + 1`` does not exceed ``depth``."""
    return (depth - 1) // 2


def derived_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def sweep_env(config: SweepConfig, seed_index: int = 0) -> Cmp:
    env_seed = config.env_seed
    if config.env_per_seed:
        env_seed = derived_seed(config.env_seed, seed_index, 1)
    return random_cmp(config.n_states, config.n_actions, config.max_outcomes, env_seed,
                      outcome_count=config.outcome_count)


def run_agent(config: SweepConfig, n_samples: int, seed_index: int) -> list:
    """Every depth for one trained agent; returns one dict per cell."""
    env = sweep_env(config, seed_index)
    traj_seed = derived_seed(config.env_seed, n_samples, seed_index)
    traj = sample_trajectory(env, None, config.start_state, n_samples, traj_seed)
    agent = model_based_agent(train_from_trajectory(traj, env.n_states, env.n_actions))
    rows = []
    for depth in config.depths:
        trials = depth_to_trials(depth)
        row = {"n_samples": n_samples, "depth": depth, "probe_depth": 2 * trials + 1,
               "trials": trials, "seed": seed_index}
        try:
            meter = RegretMeter(env, agent, config.start_state)
            rep = extract_full_model(agent, env.n_states, env.n_actions, trials,
                                     algorithm=config.algorithm, search=config.search,
                                     s0=config.start_state, truth=env, on_query=meter)
            deltas = weighted_deltas(meter.records, config.regret_weighting)
            row.update(status="ok" if not rep.failures else "partial",
                       eps_all=rep.mean_error(), eps_support=rep.mean_error(support_only=True),
                       delta_mean=float(deltas.mean()), delta_max=float(deltas.max()),
                       queries=rep.queries, failures=len(rep.failures))
        except Exception as exc:  # noqa: BLE001 - a failed cell must not stop the grid
            log.warning("cell N=%s depth=%s seed=%s failed: %s", n_samples, depth, seed_index, exc)
            row.update(status="failed", eps_all=math.nan, eps_support=math.nan,
                       delta_mean=math.nan, delta_max=math.nan, queries=0, failures=-1)
        rows.append(row)
    return rows


def weighted_deltas(records, weighting: str = "query") -> np.ndarray:
    """Regret values to average: one per issued goal, or one mean per probed transition."""
    if weighting == "query":
        return np.array([r.delta for r in records])
    groups: dict = {}
    for r in records:
        groups.setdefault((r.goal.state, r.goal.action, r.goal.outcome), []).append(r.delta)
    return np.array([np.mean(v) for v in groups.values()])


def _run_unit(args):
    config, n_samples, seed_index = args
    return run_agent(config, n_samples, seed_index)


@dataclass
class SweepResult:
    config: SweepConfig
    cells: list
    env_digest: str = ""
    fits: dict = field(default_factory=dict)

    def values(self, metric: str, n_samples: int, depth: int) -> np.ndarray:
        return np.array([c[metric] for c in self.cells
                         if c["n_samples"] == n_samples and c["depth"] == depth
                         and c["status"] != "failed"], dtype=float)

    def mean_std(self, metric: str, n_samples: int, depth: int) -> tuple:
        v = self.values(metric, n_samples, depth)
        if v.size == 0:
            return math.nan, math.nan
        std = float(v.std(ddof=1)) if v.size >= 2 else math.nan
        return float(v.mean()), std

    @property
    def failed(self) -> list:
        return [c for c in self.cells if c["status"] != "ok"]


def run_sweep(config: SweepConfig) -> SweepResult:
    units = [(config, n, s) for n in config.samples for s in range(config.seeds)]
    if config.jobs > 1:
        with ProcessPoolExecutor(config.jobs) as pool:
            chunks = list(pool.map(_run_unit, units))
    else:
        chunks = [_run_unit(u) for u in units]
    cells = [row for chunk in chunks for row in chunk]
    cells.sort(key=lambda c: (c["n_samples"], c["depth"], c["seed"]))
    result = SweepResult(config, cells, sweep_env(config).digest())
    result.fits = compute_fits(result)
    return result


def loglog_slope(x, y) -> dict:
    """Least-squares slope of ``log y`` against ``log x``."""
    lx, ly = np.log(np.asarray(x, float)), np.log(np.asarray(y, float))
    A = np.vstack([lx, np.ones_like(lx)]).T
    coef, *_ = np.linalg.lstsq(A, ly, rcond=None)
    resid = ly - A @ coef
    return {"slope": float(coef[0]), "intercept": float(coef[1]),
            "rss": float(resid @ resid), "residuals": [float(r) for r in resid]}


def depth_at_regret(depths, deltas, target: float = REGRET_TARGET) -> float:
    """Regress depth on mean regret and read off the depth at ``target`` regret."""
    d = np.asarray(deltas, float)
    n = np.asarray(depths, float)
    ok = np.isfinite(d)
    d, n = d[ok], n[ok]
    if d.size < 2 or np.ptp(d) == 0:
        return math.nan
    slope, intercept = np.polyfit(d, n, 1)
    return float(intercept + slope * target)


def compute_fits(result: SweepResult, metric: str = "eps_support") -> dict:
    cfg = result.config
    fits = {"metric": metric, "depth_slopes": {}, "monotone": {}, "n_max": {}}
    for n in cfg.samples:
        means = [result.mean_std(metric, n, d)[0] for d in cfg.depths]
        fits["depth_slopes"][str(n)] = loglog_slope(cfg.depths, means)
        fits["monotone"][str(n)] = bool(all(b < a for a, b in zip(means, means[1:])))
        per_seed = []
        for s in range(cfg.seeds):
            deltas = [next((c["delta_mean"] for c in result.cells if c["n_samples"] == n
                            and c["depth"] == d and c["seed"] == s), math.nan) for d in cfg.depths]
            per_seed.append(depth_at_regret(cfg.depths, deltas))
        fits["n_max"][str(n)] = per_seed
    return fits


def _fmt(x) -> str:
    return "" if x is None else (repr(float(x)) if isinstance(x, float) else str(x))


def write_sweep(result: SweepResult, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = result.config
    with open(out / "cells.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CELL_COLUMNS)
        for c in result.cells:
            w.writerow([_fmt(c[k]) for k in CELL_COLUMNS])
    for metric in ("eps_support", "eps_all", "delta_mean"):
        with open(out / f"table_{metric}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["depth", *cfg.samples])
            for d in cfg.depths:
                w.writerow([d, *("%.3f ± %.3f" % result.mean_std(metric, n, d) for n in cfg.samples)])
    (out / "fits.json").write_text(json.dumps(result.fits, indent=1, sort_keys=True))
    manifest = {
        "tool": "worldmodel",
        "version": __version__,
        "config": cfg.to_dict(),
        "config_hash": cfg.digest(),
        "env_digest": result.env_digest,
        "trajectory_seeds": {str(n): [derived_seed(cfg.env_seed, n, s) for s in range(cfg.seeds)]
                             for n in cfg.samples},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def load_sweep(out_dir) -> SweepResult:
    out = Path(out_dir)
    man_path, cells_path = out / "manifest.json", out / "cells.csv"
    if not man_path.exists() or not cells_path.exists():
        raise FileNotFoundError(f"{out} does not hold sweep output")
    manifest = json.loads(man_path.read_text())
    cfg = SweepConfig(**manifest["config"])
    cells = []
    with open(cells_path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CELL_COLUMNS:
            raise ValueError(f"{cells_path}: unexpected schema {reader.fieldnames}")
        for r in reader:
            cell = {k: int(r[k]) for k in ("n_samples", "depth", "probe_depth", "trials", "seed",
                                           "queries", "failures")}
            cell["status"] = r["status"]
            cell.update({k: float(r[k]) for k in ("eps_all", "eps_support", "delta_mean", "delta_max")})
            cells.append(cell)
    result = SweepResult(cfg, cells, manifest.get("env_digest", ""))
    result.fits = compute_fits(result)
    return result


def _ci(values) -> tuple:
    v = np.asarray([x for x in values if np.isfinite(x)], float)
    if v.size == 0:
        return math.nan, math.nan
    half = Z95 * v.std(ddof=1) / math.sqrt(v.size) if v.size >= 2 else math.nan
    return float(v.mean()), float(half)


def write_report(result: SweepResult, out_dir, metric: str = "eps_support",
                 regret_depth: int = 50) -> dict:
    """Plot-ready series: error vs N_max(<delta> = 0.04) and error vs <delta(depth)>."""
    cfg = result.config
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    deepest = max(cfg.depths)
    probe = regret_depth if regret_depth in cfg.depths else min(cfg.depths, key=lambda d: abs(d - regret_depth))

    fig_a, fig_b = [], []
    for n in cfg.samples:
        eps = [c[metric] for c in result.cells if c["n_samples"] == n and c["depth"] == deepest]
        nmax = result.fits["n_max"][str(n)]
        dl = [c["delta_mean"] for c in result.cells if c["n_samples"] == n and c["depth"] == probe]
        e_mean, e_ci = _ci(eps)
        m_mean, m_ci = _ci(nmax)
        d_mean, d_ci = _ci(dl)
        fig_a.append((n, m_mean, m_ci, e_mean, e_ci))
        fig_b.append((n, d_mean, d_ci, e_mean, e_ci))

    with open(out / "fig2a_error_vs_nmax.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["n_samples", "n_max", "n_max_ci95", "error", "error_ci95"])
        w.writerows([[_fmt(x) for x in row] for row in fig_a])
    with open(out / "fig2b_error_vs_regret.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["n_samples", f"delta_depth{probe}", "delta_ci95", "error", "error_ci95"])
        w.writerows([[_fmt(x) for x in row] for row in fig_b])

    slopes = {}
    good = [(r[1], r[3]) for r in fig_a if np.isfinite(r[1]) and r[1] > 0 and r[3] > 0]
    if len(good) >= 2:
        slopes["error_vs_nmax"] = loglog_slope(*zip(*good))
    goodb = [(r[1], r[3]) for r in fig_b if np.isfinite(r[1]) and r[1] > 0 and r[3] > 0]
    if len(goodb) >= 2:
        slopes["error_vs_regret"] = loglog_slope(*zip(*goodb))
    slopes["error_vs_depth"] = result.fits["depth_slopes"]
    with open(out / "slopes.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["series", "key", "slope", "intercept", "rss"])
        for name in ("error_vs_nmax", "error_vs_regret"):
            if name in slopes:
                s = slopes[name]
                w.writerow([name, "all", _fmt(s["slope"]), _fmt(s["intercept"]), _fmt(s["rss"])])
        for n, s in slopes["error_vs_depth"].items():
            w.writerow(["error_vs_depth", n, _fmt(s["slope"]), _fmt(s["intercept"]), _fmt(s["rss"])])
    return slopes
