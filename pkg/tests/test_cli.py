import json

import numpy as np
import pytest

from renewal import cli
from renewal.boosting import BoostConfig
from renewal.losses import MultinoulliLoss

SMALL = ["--simulate.n=1500", "--ps.discrete.max_rounds=40", "--ps.continuous.max_rounds=40",
         "--response.folds=3", "--response.penalty_step=2.0", "--matching.M=3", "--matching.I=5",
         "--response.dr.max_rounds=60", "--multiperiod.tau=2", "--frontier.n_alphas=5"]


def _run(*args):
    return cli.run([str(a) for a in args])


def _hashes(d):
    return {p.name: cli.sha256_file(p) for p in sorted(d.iterdir()) if p.is_file()}


@pytest.fixture(scope="module")
def discrete_run(tmp_path_factory):
    wd = tmp_path_factory.mktemp("discrete")
    assert _run("pipeline", "--kind", "discrete", "--workdir", wd, *SMALL) == 0
    return wd


# ---------------------------------------------------------------------------
# config


def test_override_parsing():
    assert cli.parse_override("--a.b=3") == {"a": {"b": 3}}
    assert cli.parse_override("--a=[1, 2]") == {"a": [1, 2]}
    assert cli.parse_override("--a.b=hello") == {"a": {"b": "hello"}}
    assert cli.parse_override("--x=true") == {"x": True}
    with pytest.raises(cli.ConfigError):
        cli.parse_override("--novalue")


def test_config_file_and_overrides(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text('seed = 3\n[ps.discrete]\neta = 0.2\n[grid]\nn_intervals = 4\n')
    cfg = cli.load_config(p, ["--grid.n_intervals=6", "--ps.discrete.min_child_weight=2"])
    assert cfg["seed"] == 3 and cfg["ps"]["discrete"]["eta"] == 0.2
    assert cfg["grid"]["n_intervals"] == 6
    assert cfg["ps"]["discrete"]["min_child_weight"] == 2.0


@pytest.mark.parametrize("bad", ["--bogus=1", "--ps.discrete.depth=3", "--grid.n_intervals=x",
                                 "--kind=ordinal", "--ps.discrete.eta=0", "--simulate.nope=1",
                                 "--trim.enabled=1", "--tune.grids.foo=[1]"])
def test_bad_config_rejected(bad):
    with pytest.raises(cli.ConfigError):
        cli.load_config(None, [bad])


def test_unknown_key_exit_code(tmp_path, capsys):
    assert _run("simulate", "--workdir", tmp_path, "--simulate.bogus=1") == 1
    assert "unknown config key" in capsys.readouterr().err
    p = tmp_path / "c.toml"
    p.write_text("[frontier]\nalpha = [0.1]\n")
    assert _run("simulate", "--config", p, "--workdir", tmp_path) == 1


def test_missing_input_exit_code(tmp_path, capsys):
    assert _run("fit-ps", "--workdir", tmp_path) == 1
    assert "missing input" in capsys.readouterr().err


def test_runtime_error_exit_code(tmp_path):
    # more intervals than distinct doses leaves an interval empty when fitting
    assert _run("simulate", "--workdir", tmp_path, "--simulate.n=30") == 0
    assert _run("trim", "--workdir", tmp_path) == 0
    (tmp_path / "grid.json").write_text(json.dumps({"boundaries": ["-1.0", "-0.5", "0.5", "1.0"],
                                                    "medians": ["-0.7", "0.0", "0.7"]}))
    assert _run("fit-ps", "--workdir", tmp_path, "--grid.n_intervals=3") == 2


def test_threads_env(monkeypatch):
    monkeypatch.setenv("RENEWAL_THREADS", "3")
    assert cli.resolve_threads(None) == 3
    assert cli.resolve_threads(2) == 2
    monkeypatch.delenv("RENEWAL_THREADS")
    assert cli.resolve_threads(None) == 1
    with pytest.raises(cli.ConfigError):
        cli.resolve_threads(0)


def test_substreams_are_named_and_stable():
    a = cli.substream(7, "match")
    assert a == cli.substream(7, "match")
    assert len({a, cli.substream(7, "fit-ps"), cli.substream(8, "match")}) == 3


# ---------------------------------------------------------------------------
# stages


def test_simulate_twice_identical(tmp_path):
    for d in ("a", "b"):
        assert _run("simulate", "--seed", 7, "--workdir", tmp_path / d, "--simulate.n=500") == 0
    a, b = _hashes(tmp_path / "a"), _hashes(tmp_path / "b")
    assert a["portfolio.csv"] == b["portfolio.csv"] and a["portfolio.meta.json"] == b["portfolio.meta.json"]
    ma, mb = (json.loads((tmp_path / d / "manifests" / "simulate.json").read_text()) for d in "ab")
    assert ma["outputs"] == mb["outputs"] and ma["stage_seed"] == mb["stage_seed"]
    assert _run("simulate", "--seed", 8, "--workdir", tmp_path / "c", "--simulate.n=500") == 0
    assert _hashes(tmp_path / "a")["portfolio.csv"] != _hashes(tmp_path / "c")["portfolio.csv"]


def test_discrete_pipeline_artifacts(discrete_run):
    wd = discrete_run
    for name in ("balance.tsv", "response.json", "frontier.tsv", "boundary.tsv", "multiperiod.json",
                 "lasso_path.tsv", "dose_response.tsv"):
        assert (wd / name).exists(), name
    bal = (wd / "balance.tsv").read_text().splitlines()
    assert bal[0].split("\t")[0] and len(bal) > 2
    model = json.loads((wd / "response.json").read_text())
    assert model["kind"] == "pooled_logistic"
    head, *rows = (wd / "frontier.tsv").read_text().strip().splitlines()
    assert head.split("\t") == ["alpha", "expected_profit", "expected_churn", "dual_gap", "feasible"]
    profit = [float(r.split("\t")[1]) for r in rows]
    assert len(rows) == 5 and np.all(np.diff(profit) >= 0)
    m = json.loads((wd / "manifests" / "fit-ps.json").read_text())
    assert set(m) >= {"inputs", "outputs", "config", "seed", "versions"}
    assert m["config"]["simulate"]["n"] == 1500
    assert m["outputs"]["ps.json"] == cli.sha256_file(wd / "ps.json")
    assert (wd / "multiperiod.tsv").read_text().splitlines()[-1].startswith("# competitiveness feedback")


def test_check_is_noop(discrete_run, capsys):
    before = {p: cli.sha256_file(p) for p in discrete_run.rglob("*") if p.is_file()}
    mtimes = {p: p.stat().st_mtime_ns for p in before}
    assert _run("pipeline", "--kind", "discrete", "--workdir", discrete_run, "--check", *SMALL) == 0
    out = capsys.readouterr().out
    assert "done" not in out and out.count("up to date") == len(cli.pipeline_stages(
        cli.load_config(None, SMALL + ["--kind=discrete"])))
    for p, h in before.items():
        if p.name != "config.toml":
            assert cli.sha256_file(p) == h and p.stat().st_mtime_ns == mtimes[p]


def test_check_reruns_changed_stage(discrete_run, tmp_path, capsys):
    import shutil
    wd = tmp_path / "copy"
    shutil.copytree(discrete_run, wd)
    assert _run("frontier", "--kind", "discrete", "--workdir", wd, "--check", *SMALL,
                "--frontier.n_alphas=3") == 0
    assert "frontier: done" in capsys.readouterr().out
    assert len((wd / "frontier.tsv").read_text().strip().splitlines()) == 4


def test_rerun_from_manifest_is_byte_identical(discrete_run, tmp_path):
    import shutil
    wd = tmp_path / "copy"
    shutil.copytree(discrete_run, wd)
    for stage in ("fit-ps", "match", "frontier"):
        manifest = wd / "manifests" / f"{stage}.json"
        m = json.loads(manifest.read_text())
        for name in m["outputs"]:
            (wd / name).unlink()
        assert _run(stage, "--from-manifest", manifest, "--workdir", wd) == 0
        assert {n: cli.sha256_file(wd / n) for n in m["outputs"]} == m["outputs"]


def test_continuous_pipeline(tmp_path):
    wd = tmp_path / "c"
    assert _run("pipeline", "--kind", "continuous", "--workdir", wd, *SMALL,
                "--multiperiod.step=0.1") == 0
    assert json.loads((wd / "response.json").read_text())["kind"] == "boosted_dr"
    assert not (wd / "imputed.bin").exists()
    rows = (wd / "boundary.tsv").read_text().strip().splitlines()[1:]
    assert [r.split("\t")[0] for r in rows] == ["realized", "A", "B"]


def test_converge_command(discrete_run, tmp_path):
    import shutil
    wd = tmp_path / "v"
    shutil.copytree(discrete_run, wd)
    assert _run("converge", "--workdir", wd, *SMALL, "--converge.C=[3, 5]") == 0
    rows = (wd / "convergence.tsv").read_text().strip().splitlines()
    assert rows[0].startswith("C\t") and [r.split("\t")[0] for r in rows[1:]] == ["3", "5"]


def test_continuous_tune_response(tmp_path):
    wd = tmp_path / "c"
    assert _run("pipeline", "--kind", "continuous", "--workdir", wd, *SMALL, "--multiperiod.tau=1") == 0
    assert _run("tune-response", "--kind", "continuous", "--workdir", wd, *SMALL, "--tune.folds=2",
                "--tune.max_rounds=20", "--tune.grids.eta=[0.3]", "--tune.grids.max_depth=[1, 2]") == 0
    best = json.loads((wd / "tune_response.json").read_text())
    assert best["section"] == "response.dr" and best["config"]["max_depth"] in (1, 2)
    assert len((wd / "tune_response.tsv").read_text().strip().splitlines()) - 1 == (2 + 1 + 1) * 2


def test_input_csv_skips_simulation(discrete_run, tmp_path):
    wd = tmp_path / "w"
    assert _run("trim", "--workdir", wd, "--input", discrete_run / "portfolio.csv") == 0
    assert (wd / "trimmed.csv").read_bytes() == (discrete_run / "trimmed.csv").read_bytes()
    cfg = cli.load_config(None, [f"--paths.input={str(discrete_run / 'portfolio.csv')!r}"])
    assert "simulate" not in cli.pipeline_stages(cfg)


# ---------------------------------------------------------------------------
# tuning


def test_singleton_grid_one_evaluation_per_fold():
    calls = []

    def ev(cfg, tr, te):
        calls.append((cfg, len(tr), len(te)))
        return 1.0

    grids = {p: [v] for p, v in zip(cli.TUNE_PARAMS, [0.2, 2, 1.0, 1.0, 1.0, 0.0, 1.0, 0.0])}
    res = cli.tune(ev, grids, BoostConfig(), n=50, folds=5, seed=0)
    # one candidate per stage, each evaluated once per fold
    assert len(calls) == 5 * len(cli.TUNE_STAGES)
    assert res.best["eta"] == 0.2 and res.best["max_depth"] == 2
    assert all(tr + te == 50 for _, tr, te in calls)
    assert len(res.rows) == len(calls)


def test_tune_singleton_only_first_stage_counts_once():
    calls = []
    res = cli.tune(lambda c, tr, te: calls.append(1) or 0.0, {"eta": [0.3]}, BoostConfig(), n=20, folds=4)
    assert len(calls) == 4 and res.best["eta"] == 0.3


def test_tune_stages_are_sequential():
    # the loss rewards eta == 0.1 and, only given that, subsample == 0.5
    seen = []

    def ev(cfg, tr, te):
        seen.append((cfg.eta, cfg.subsample))
        return abs(cfg.eta - 0.1) + (abs(cfg.subsample - 0.5) if cfg.eta == 0.1 else 5.0)

    grids = {"eta": [0.3, 0.1], "subsample": [1.0, 0.5]}
    res = cli.tune(ev, grids, BoostConfig(), n=20, folds=2)
    assert res.best["eta"] == 0.1 and res.best["subsample"] == 0.5
    # second stage only sees the frozen eta
    assert {e for e, s in seen[4:]} == {0.1}
    assert len(seen) == 2 * 2 + 2 * 2


def test_tune_empty_grid():
    with pytest.raises(ValueError):
        cli.tune(lambda *a: 0.0, {"eta": []}, BoostConfig(), n=20, folds=2)


def test_tune_selects_depth_for_interaction():
    rng = np.random.default_rng(0)
    X = rng.uniform(-1, 1, size=(600, 2))
    y = ((X[:, 0] > 0) ^ (X[:, 1] > 0)).astype(int)
    flip = rng.uniform(size=600) < 0.05
    y = np.where(flip, 1 - y, y)
    ev = cli.boost_evaluator(X, y, lambda: MultinoulliLoss(2))
    base = BoostConfig(eta=0.3, max_rounds=30, early_stop_patience=0)
    res = cli.tune(ev, {"max_depth": [0, 1, 2]}, base, n=600, folds=5, seed=1)
    assert res.best["max_depth"] >= 2
    means = {s["params"]["max_depth"]: s["mean_loss"] for s in res.summary}
    assert means[2] < min(means[0], means[1])


def test_full_grids():
    g = cli.FULL_GRIDS
    assert g["eta"] == [0.01, 0.02, 0.03, 0.04, 0.05, 0.1, 0.15, 0.2, 0.25, 0.5]
    assert g["gamma"] == g["reg_lambda"] == g["reg_alpha"] == [0, 0.1, 1, 10, 100]
    assert g["subsample"][0] == 0.1 and g["subsample"][-1] == 1.0 and len(g["colsample"]) == 10
    assert g["min_child_weight"] == [0, 1, 2, 3, 4, 5, 10, 25, 50]
    assert g["max_depth"][:3] == [0, 1, 2] and g["max_depth"][-2:] == [25, 50]
    cfg = cli.load_config()
    assert cli.tune_grids(cfg, True) == g
    assert cli.tune_grids(cfg, False) == cfg["tune"]["grids"]


def test_tune_ps_command(discrete_run, tmp_path):
    import shutil
    wd = tmp_path / "t"
    shutil.copytree(discrete_run, wd)
    args = ["tune-ps", "--workdir", wd, *SMALL, "--tune.folds=3", "--tune.max_rounds=10",
            "--tune.grids.eta=[0.3]", "--tune.grids.max_depth=[1, 2]"]
    assert _run(*args) == 0
    rows = (wd / "tune_ps.tsv").read_text().strip().splitlines()
    head = rows[0].split("\t")
    assert head[:2] == ["stage", "candidate"] and head[-2:] == ["fold", "loss"]
    # stage 1: two candidates; stages 2 and 3: one each; three folds apiece
    assert len(rows) - 1 == (2 + 1 + 1) * 3
    best = json.loads((wd / "tune_ps.json").read_text())
    assert best["config"]["max_depth"] in (1, 2) and best["section"] == "ps.discrete"
    # the emitted snippet is a valid config fragment
    cfg = cli.load_config(wd / "tune_ps.toml")
    assert cfg["ps"]["discrete"]["max_depth"] == best["config"]["max_depth"]


def test_tune_response_discrete(discrete_run, tmp_path):
    import shutil
    wd = tmp_path / "t"
    shutil.copytree(discrete_run, wd)
    assert _run("tune-response", "--workdir", wd, *SMALL, "--tune.folds=3") == 0
    out = json.loads((wd / "tune_response.json").read_text())
    assert out["penalty_1se"] >= out["penalty_min"]
