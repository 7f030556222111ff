import csv
import json

import numpy as np
import pytest

from worldmodel import cli, sweep
from worldmodel.cmp import load_cmp
from worldmodel.sweep import (
    SweepConfig,
    depth_at_regret,
    depth_to_trials,
    load_sweep,
    loglog_slope,
    run_sweep,
    weighted_deltas,
    write_sweep,
)

SMALL = dict(n_states=5, n_actions=2, max_outcomes=3, samples=(200, 800), depths=(5, 11), seeds=2)


def run(*argv):
    return cli.main([str(a) for a in argv])


class TestConfig:
    def test_depth_mapping(self):
        assert [depth_to_trials(d) for d in (3, 10, 11, 600)] == [1, 4, 5, 299]

    @pytest.mark.parametrize("bad", [dict(samples=()), dict(depths=(2,)), dict(seeds=0),
                                     dict(regret_weighting="goal")])
    def test_rejects(self, bad):
        with pytest.raises(ValueError):
            SweepConfig(**bad)

    def test_file_round_trip(self, tmp_path):
        cfg = SweepConfig(**SMALL)
        (tmp_path / "c.json").write_text(json.dumps(cfg.to_dict()))
        back = SweepConfig.from_file(tmp_path / "c.json")
        assert back == cfg and back.digest() == cfg.digest()

    def test_unknown_key(self, tmp_path):
        (tmp_path / "c.json").write_text('{"n_states": 4, "colour": 1}')
        with pytest.raises(ValueError, match="unknown"):
            SweepConfig.from_file(tmp_path / "c.json")

    def test_jobs_do_not_change_digest(self):
        assert SweepConfig(jobs=4).digest() == SweepConfig().digest()


class TestFits:
    def test_loglog_slope_exact_power(self):
        x = np.array([10, 20, 50, 100.0])
        fit = loglog_slope(x, 3 * x ** -0.5)
        assert fit["slope"] == pytest.approx(-0.5) and fit["rss"] < 1e-20

    def test_depth_at_regret_line(self):
        deltas = [0.10, 0.08, 0.06]
        depths = [10, 20, 30]
        assert depth_at_regret(depths, deltas, 0.04) == pytest.approx(40)

    def test_depth_at_regret_degenerate(self):
        assert np.isnan(depth_at_regret([10, 20], [0.1, 0.1]))

    def test_transition_weighting(self):
        from worldmodel.evaluation import RegretRecord
        from worldmodel.goals import CountingGoal
        g1 = CountingGoal.threshold(0, 0, 0, 3, 1, 1)
        g2 = CountingGoal.threshold(0, 0, 1, 3, 1, 1)
        recs = [RegretRecord(g1, 0, 1, 1.0), RegretRecord(g1, 0, 1, 0.0), RegretRecord(g2, 0, 1, 0.0)]
        assert weighted_deltas(recs, "query").mean() == pytest.approx(1 / 3)
        assert weighted_deltas(recs, "transition").mean() == pytest.approx(0.25)


@pytest.fixture(scope="module")
def small_sweep(tmp_path_factory):
    out = tmp_path_factory.mktemp("sweep")
    result = run_sweep(SweepConfig(**SMALL))
    write_sweep(result, out)
    return result, out


class TestSweep:
    def test_cells(self, small_sweep):
        result, _ = small_sweep
        assert len(result.cells) == 2 * 2 * 2
        assert all(c["status"] == "ok" for c in result.cells)
        assert all(0 <= c["delta_mean"] <= 1 for c in result.cells)

    def test_std_over_seeds(self, small_sweep):
        result, _ = small_sweep
        mean, std = result.mean_std("eps_support", 200, 5)
        v = result.values("eps_support", 200, 5)
        assert mean == pytest.approx(v.mean()) and std == pytest.approx(v.std(ddof=1))

    def test_reload(self, small_sweep):
        result, out = small_sweep
        back = load_sweep(out)
        assert back.config == result.config
        assert back.cells == result.cells
        assert back.fits == result.fits

    def test_table_layout(self, small_sweep):
        _, out = small_sweep
        rows = list(csv.reader(open(out / "table_eps_support.csv")))
        assert rows[0] == ["depth", "200", "800"]
        assert [r[0] for r in rows[1:]] == ["5", "11"]
        assert all(" ± " in x for r in rows[1:] for x in r[1:])

    def test_schema_mismatch(self, small_sweep, tmp_path):
        _, out = small_sweep
        (tmp_path / "manifest.json").write_text((out / "manifest.json").read_text())
        (tmp_path / "cells.csv").write_text("n_samples,depth\n1,3\n")
        with pytest.raises(ValueError, match="schema"):
            load_sweep(tmp_path)

    def test_parallel_matches_serial(self, small_sweep):
        result, _ = small_sweep
        par = run_sweep(SweepConfig(**SMALL, jobs=2))
        assert par.cells == result.cells


class TestCli:
    def test_usage_errors(self, capsys):
        assert run() == 1
        assert run("bogus") == 1
        assert run("gen-env") == 1                      # --out missing
        assert run("sweep", "--samples", "a,b", "--out", "x") == 1

    def test_pipeline(self, tmp_path):
        env, model = tmp_path / "env.json", tmp_path / "m.json"
        assert run("gen-env", "--states", 6, "--actions", 3, "--max-outcomes", 3, "--seed", 1,
                   "--out", env) == 0
        assert load_cmp(env).n_states == 6
        man = json.loads((tmp_path / "env.json.manifest.json").read_text())
        assert man["seeds"] == {"env": 1} and man["outputs"]
        assert run("train", "--env", env, "--samples", 300, "--seed", 2, "--out", model) == 0
        rep = tmp_path / "r.csv"
        assert run("extract", "--env", env, "--model", model, "--depth", 21, "--out", rep) == 0
        rows = list(csv.DictReader(open(rep)))
        assert len(rows) == 6 * 3 * 6 and rows[0]["n"] == "10"
        reg = tmp_path / "g.csv"
        assert run("regret", "--env", env, "--model", model, "--depth", 11, "--out", reg) == 0
        rows = list(csv.DictReader(open(reg)))
        assert rows and set(rows[0]) == set(cli.REGRET_COLUMNS)
        assert rows[0]["n_samples"] == "300"
        assert (tmp_path / "g.csv.manifest.json").exists()

    def test_train_zero_is_uniform(self, tmp_path):
        env, model = tmp_path / "env.json", tmp_path / "m.json"
        run("gen-env", "--states", 4, "--actions", 2, "--max-outcomes", 2, "--out", env)
        assert run("train", "--env", env, "--samples", 0, "--out", model) == 0
        P = np.array(json.loads(model.read_text())["transitions"], dtype=float)
        assert np.allclose(P, 0.25)

    def test_single_goal_regret(self, tmp_path):
        env = tmp_path / "env.json"
        run("gen-env", "--states", 4, "--actions", 2, "--max-outcomes", 2, "--out", env)
        out = tmp_path / "g.csv"
        goal = "count[a=1,b=0,s=2,a'=1,s'=3,n=5,atmost=2]"
        assert run("regret", "--env", env, "--goal", goal, "--out", out) == 0
        (row,) = csv.DictReader(open(out))
        assert row["goal"] == goal and float(row["delta"]) == 0.0
        assert run("regret", "--env", env, "--goal", "seq[ ev(S=1) ]", "--out", out) == 1

    def test_dimension_mismatch(self, tmp_path):
        a, b, m = tmp_path / "a.json", tmp_path / "b.json", tmp_path / "m.json"
        run("gen-env", "--states", 4, "--actions", 2, "--max-outcomes", 2, "--out", a)
        run("gen-env", "--states", 5, "--actions", 2, "--max-outcomes", 2, "--out", b)
        run("train", "--env", a, "--samples", 10, "--out", m)
        assert run("extract", "--env", b, "--model", m, "--depth", 11, "--out", tmp_path / "x") == 1

    def test_malformed_and_missing_files(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        assert run("train", "--env", bad, "--samples", 5, "--out", tmp_path / "m") == 1
        assert run("train", "--env", tmp_path / "none.json", "--samples", 5, "--out", tmp_path / "m") == 1

    def test_non_communicating_is_invariant(self, tmp_path):
        assert run("gen-env", "--states", 40, "--actions", 2, "--max-outcomes", 1,
                   "--out", tmp_path / "e.json") == 2

    def test_check_bound_alg1_passes(self, tmp_path):
        env = tmp_path / "env.json"
        run("gen-env", "--states", 6, "--actions", 3, "--max-outcomes", 3, "--seed", 4, "--out", env)
        assert run("extract", "--env", env, "--alg", 1, "--depth", 101, "--check-bound",
                   "--out", tmp_path / "r.csv") == 0

    @pytest.mark.xfail(strict=True, reason="Alg 2 exceeds sqrt(p(1-p)/n) on near-deterministic transitions")
    def test_check_bound_alg2_example(self, tmp_path):
        env = tmp_path / "env.json"
        run("gen-env", "--states", 20, "--actions", 5, "--max-outcomes", 5, "--seed", 1, "--out", env)
        assert run("extract", "--env", env, "--alg", 2, "--depth", 101, "--check-bound",
                   "--out", tmp_path / "r.csv") == 0

    def test_myopic_demo(self, tmp_path, capsys):
        out = tmp_path / "demo.json"
        assert run("myopic-demo", "--out", out) == 0
        doc = json.loads(out.read_text())
        assert doc["agreement_fraction"] == 1.0

    def test_verify(self, capsys):
        assert run("verify", "--envs", 3) == 0
        assert "all invariants hold" in capsys.readouterr().out

    def test_sweep_is_byte_identical(self, tmp_path):
        args = ["sweep", "--seeds", 2, "--samples", "100,300", "--depths", "5,9"]
        assert run(*args, "--out", tmp_path / "a") == 0
        assert run(*args, "--out", tmp_path / "b") == 0
        for name in ("cells.csv", "table_eps_support.csv", "fits.json", "manifest.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_partial_failure_exit(self, tmp_path, monkeypatch):
        real = sweep.extract_full_model

        def flaky(agent, *a, **kw):
            if a[2] == 4:
                raise RuntimeError("boom")
            return real(agent, *a, **kw)

        monkeypatch.setattr(sweep, "extract_full_model", flaky)
        code = run("sweep", "--seeds", 2, "--samples", "100", "--depths", "5,9", "--out", tmp_path)
        assert code == 3
        statuses = {r["depth"]: r["status"] for r in csv.DictReader(open(tmp_path / "cells.csv"))}
        assert statuses == {"5": "ok", "9": "failed"}

    def test_report_merges_and_refuses(self, tmp_path):
        common = ["--seeds", 2, "--depths", "5,9,15"]
        run("sweep", *common, "--samples", "100", "--out", tmp_path / "a")
        run("sweep", *common, "--samples", "400", "--out", tmp_path / "b")
        assert run("report", "--sweep", tmp_path / "a", tmp_path / "b", "--regret-depth", 9,
                   "--out", tmp_path / "rep") == 0
        rows = list(csv.reader(open(tmp_path / "rep" / "fig2a_error_vs_nmax.csv")))
        assert rows[0] == ["n_samples", "n_max", "n_max_ci95", "error", "error_ci95"]
        assert [r[0] for r in rows[1:]] == ["100", "400"]
        assert (tmp_path / "rep" / "slopes.csv").exists()
        # different env seed cannot be merged
        run("sweep", *common, "--samples", "200", "--env-seed", 5, "--out", tmp_path / "c")
        assert run("report", "--sweep", tmp_path / "a", tmp_path / "c", "--out", tmp_path / "x") == 1
        # overlapping grids and empty directories are refused
        assert run("report", "--sweep", tmp_path / "a", tmp_path / "a", "--out", tmp_path / "x") == 1
        (tmp_path / "empty").mkdir()
        assert run("report", "--sweep", tmp_path / "empty", "--out", tmp_path / "x") == 1
