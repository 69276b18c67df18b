import csv
import json
import statistics
from pathlib import Path

import numpy as np
import pytest

from nvrpg import harness
from nvrpg.algorithms import COLUMNS, read_csv
from nvrpg.cli import main
from nvrpg.errors import ConfigError
from nvrpg.gridworld import chain_2state
from nvrpg.mdp import mdp_to_dict

SMALL = """
# tiny general-utility run
env.name = chain_2state
utility.kind = log_barrier
schedule.T = 40
schedule.alpha0 = 0.5
seeds = 0
"""


def cfg_text(**kw):
    return SMALL + "".join(f"{k} = {v}\n" for k, v in kw.items())


def test_defaults_and_resolution():
    cfg = harness.parse_config("")
    v = cfg.values
    assert v["env.name"] == "gridworld_8x8_slippery" and v["utility.kind"] == "log_barrier"
    assert v["env.slip"] == pytest.approx(1 / 3) and v["env.gamma"] == 0.9
    assert v["schedule.horizon"] == 81 and cfg.seeds == [0, 1, 2, 3, 4]
    assert set(v) == set(harness.DEFAULTS)
    text = cfg.resolved_text()
    assert "schedule.horizon=81\n" in text and "linfa.beta=\n" in text


def test_overrides_win_over_file():
    cfg = harness.parse_config(cfg_text(), {"seeds": "3,4", "schedule.T": "7"})
    assert cfg.seeds == [3, 4] and cfg["schedule.T"] == 7


@pytest.mark.parametrize("text, field", [
    ("env.name = mars", "env.name"),
    ("algo.name = ppo", "algo.name"),
    ("bogus.key = 1", "bogus.key"),
    ("schedule.T = ten", "schedule.T"),
    ("schedule.T = 0", "schedule.T"),
    ("schedule.alpha0 = -1", "schedule.alpha0"),
    ("schedule.kind = cosine", "schedule.kind"),
    ("utility.kind = entropy", "utility.kind"),
    ("algo.exact_grad = maybe", "algo.exact_grad"),
    ("seeds = 1,1", "seeds"),
    ("seeds = a", "seeds"),
    ("env.start = corner", "env.start"),
    ("algo.engine = gpu", "algo.engine"),
    ("linfa.fit = magic", "linfa.fit"),
    ("just some words", "line 1"),
    ("env.name = continuous_chain_1d\nalgo.name = vanilla_pg", "algo.name"),
    ("env.name = gridworld_5x5_reward\nalgo.name = nvrpg_standard\nutility.kind = log_barrier", "algo.name"),
])
def test_config_errors_name_the_field(text, field):
    with pytest.raises(ConfigError, match=field.replace(".", r"\.")):
        harness.parse_config(text)


def test_mdp_file_env_with_and_without_reward(tmp_path):
    doc = mdp_to_dict(chain_2state())
    bare = tmp_path / "bare.json"
    bare.write_text(json.dumps(doc))
    with pytest.raises(ConfigError, match="reward"):
        harness.parse_config(f"env.name = {bare}\nutility.kind = linear")
    assert harness.parse_config(f"env.name = {bare}\nutility.kind = log_barrier")["env.gamma"] == 0.8
    doc["reward"] = [[1, 0], [0, 2]]
    rich = tmp_path / "rich.json"
    rich.write_text(json.dumps(doc))
    cfg = harness.parse_config(f"env.name = {rich}\nalgo.name = nvrpg_standard\nschedule.T = 5\nseeds = 1")
    res = harness.run_experiment(cfg, tmp_path / "out")
    assert res.ok


def test_worker_count_env(monkeypatch):
    monkeypatch.setenv(harness.WORKERS_ENV, "3")
    assert harness.worker_count() == 3
    monkeypatch.setenv(harness.WORKERS_ENV, "0")
    with pytest.raises(ConfigError):
        harness.worker_count()
    monkeypatch.delenv(harness.WORKERS_ENV)
    assert harness.worker_count() == 1


def test_single_seed_T1_gives_one_row(tmp_path):
    cfg = harness.parse_config(cfg_text(**{"schedule.T": 1}))
    res = harness.run_experiment(cfg, tmp_path)
    meta, header, rows = read_csv(res.seeds[0].path)
    assert header == list(COLUMNS) + ["schema_version"]
    assert len(rows) == 1
    assert meta["config.schedule.T"] == "1" and meta["schema_version"] == "1"
    assert (tmp_path / "config.resolved").read_text() == cfg.resolved_text()


def _independent_summary(paths, column):
    """Per-t medians and quartiles straight from the csv module and statistics."""
    per_t = {}
    for p in paths:
        lines = [l for l in Path(p).read_text().splitlines() if not l.startswith("#")]
        for rec in csv.DictReader(lines):
            if rec[column]:
                per_t.setdefault(int(rec["t"]), []).append(float(rec[column]))
    return {t: statistics.quantiles(v, n=4, method="inclusive") for t, v in per_t.items()}


def test_five_seed_summary_matches_independent_recomputation(tmp_path):
    cfg = harness.parse_config(cfg_text(seeds="0,1,2,3,4", **{"algo.log_every": 5}))
    res = harness.run_experiment(cfg, tmp_path)
    assert res.ok
    summary = list(csv.DictReader(open(res.summary_path)))
    assert len(summary) == 8
    paths = [r.path for r in res.seeds]
    for col in ("F_exact", "d_norm", "is_weight"):
        oracle = _independent_summary(paths, col)
        for row in summary:
            q25, med, q75 = oracle[int(row["t"])]
            assert float(row[f"{col}_q25"]) == pytest.approx(q25, abs=1e-12)
            assert float(row[f"{col}_median"]) == pytest.approx(med, abs=1e-12)
            assert float(row[f"{col}_q75"]) == pytest.approx(q75, abs=1e-12)
            assert row["num_seeds"] == "5"
    # J_exact is empty for a nonlinear utility, and so is its summary
    assert summary[0]["J_exact_median"] == ""


def test_rerun_is_byte_identical(tmp_path):
    cfg = harness.parse_config(cfg_text(seeds="0,1"))
    a = harness.run_experiment(cfg, tmp_path / "a")
    b = harness.run_experiment(cfg, tmp_path / "b")
    for ra, rb in zip(a.seeds, b.seeds):
        assert Path(ra.path).read_bytes() == Path(rb.path).read_bytes()
    assert a.summary_path.read_bytes() == b.summary_path.read_bytes()


def test_parallel_workers_match_sequential(tmp_path, monkeypatch):
    cfg = harness.parse_config(cfg_text(seeds="0,1,2"))
    seq = harness.run_experiment(cfg, tmp_path / "seq")
    monkeypatch.setenv(harness.WORKERS_ENV, "2")
    par = harness.run_experiment(cfg, tmp_path / "par")
    for ra, rb in zip(seq.seeds, par.seeds):
        assert Path(ra.path).read_bytes() == Path(rb.path).read_bytes()


def test_abort_keeps_partial_log_and_fails(tmp_path):
    text = ("env.name = gridworld_8x8_slippery\nschedule.T = 300\nschedule.alpha0 = 30\nseeds = 0\n")
    res = harness.run_experiment(harness.parse_config(text), tmp_path)
    assert not res.ok
    meta, _, rows = read_csv(res.seeds[0].path)
    assert "sigma/2" in meta["aborted"]
    assert 0 < len(rows) < 300


@pytest.mark.parametrize("algo, extra", [
    ("nvrpg_general", {}),
    ("vanilla_pg", {"algo.batch_size": 4, "schedule.alpha0": 0.1}),
    ("linfa_pg", {"linfa.K": 30, "linfa.N": 3, "schedule.alpha0": 0.1}),
    ("nvrpg_standard", {"utility.kind": "linear"}),
])
def test_every_algorithm_runs(tmp_path, algo, extra):
    cfg = harness.parse_config(cfg_text(**{"algo.name": algo, "schedule.T": 6, **extra}))
    res = harness.run_experiment(cfg, tmp_path)
    assert res.ok, res.seeds[0].status
    _, header, rows = read_csv(res.seeds[0].path)
    assert len(rows) == 6
    if algo == "linfa_pg":
        assert header[-4:-1] == ["K", "final_avg_loss", "fit_residual_at_visited"]


def test_continuous_chain_and_tile_features(tmp_path):
    chain = harness.parse_config("env.name = continuous_chain_1d\nalgo.name = nvrpg_standard\n"
                                 "schedule.T = 5\nschedule.alpha0 = 0.03\nseeds = 0")
    assert harness.run_experiment(chain, tmp_path / "c").ok
    grid = harness.parse_config("env.name = gridworld_5x5_reward\nalgo.name = linfa_pg\nutility.kind = log_barrier\n"
                                "env.start = uniform\nlinfa.features = tile2\nlinfa.K = 20\nlinfa.N = 2\n"
                                "schedule.T = 3\nschedule.alpha0 = 0.1\nseeds = 0")
    assert harness.run_experiment(grid, tmp_path / "g").ok


# -- command line -------------------------------------------------------------------------------


def test_cli_run(tmp_path, capsys):
    conf = tmp_path / "exp.conf"
    conf.write_text(SMALL)
    out = tmp_path / "out"
    assert main(["run", "--config", str(conf), "--seed-override", "5", "6", "--out", str(out)]) == 0
    assert sorted(p.name for p in out.iterdir()) == ["config.resolved", "seed_5.csv", "seed_6.csv", "summary.csv"]
    assert "seed 5: ok" in capsys.readouterr().out


def test_cli_run_exit_codes(tmp_path, capsys):
    conf = tmp_path / "bad.conf"
    conf.write_text("algo.name = ppo\n")
    assert main(["run", "--config", str(conf)]) == 2
    assert "algo.name" in capsys.readouterr().err
    assert main(["run", "--config", str(tmp_path / "missing.conf")]) == 2
    conf.write_text("schedule.T = 300\nschedule.alpha0 = 30\nseeds = 0\n")
    assert main(["run", "--config", str(conf), "--out", str(tmp_path / "o")]) == 3


def test_cli_envcheck(tmp_path, capsys):
    good = tmp_path / "m.json"
    good.write_text(json.dumps(mdp_to_dict(chain_2state())))
    assert main(["envcheck", "--mdp", str(good)]) == 0
    assert "ok: 2 states, 2 actions" in capsys.readouterr().out
    doc = mdp_to_dict(chain_2state())
    doc["transitions"][0]["p"] = 0.01
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(doc))
    assert main(["envcheck", "--mdp", str(bad)]) == 2
    assert "invalid MDP" in capsys.readouterr().err
    assert main(["envcheck", "--mdp", str(tmp_path / "nope.json")]) == 2
    (tmp_path / "junk.json").write_text("{not json")
    assert main(["envcheck", "--mdp", str(tmp_path / "junk.json")]) == 2
