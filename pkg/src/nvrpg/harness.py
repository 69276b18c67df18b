"""Experiment runner: flat key=value configs, built-in environments, seeded runs,
per-seed CSV logs and a quantile summary."""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from nvrpg import algorithms as alg
from nvrpg import linfa
from nvrpg.chain import ChainTask, ContinuousChain
from nvrpg.errors import ConfigError, NumericError
from nvrpg.gridworld import build_gridworld, chain_2state, frozen_lake_8x8, goal_reward, gridworld_5x5
from nvrpg.mdp import TabularMdp, load_mdp
from nvrpg.policy import PolicyParams, TabularSoftmax
from nvrpg.utilities import make_utility

WORKERS_ENV = "NVRPG_WORKERS"
ALGORITHMS = ("nvrpg_general", "nvrpg_standard", "vanilla_pg", "linfa_pg")
BUILTIN_ENVS = ("gridworld_5x5_reward", "gridworld_8x8_slippery", "chain_2state", "continuous_chain_1d")
SUMMARY_COLUMNS = ("F_exact", "J_exact", "grad_norm_exact", "d_norm", "is_weight")

# Every key a config may set, with its default.  None means "derived": the
# environment or algorithm decides (documented next to each entry).
DEFAULTS = {
    "env.name": "gridworld_8x8_slippery",  # a built-in name, or a path to an MDP JSON file
    "env.slip": None,  # grids: 1/3 for the 8x8 lake, 0 for the 5x5 grid
    "env.gamma": None,  # builtin default (0.9 grids, 0.8 chain_2state, 0.9 continuous chain)
    "env.start": "cells",  # grids: "cells" (map start) or "uniform" over all states
    "algo.name": "nvrpg_general",
    "algo.batch_size": 30,  # vanilla_pg trajectories per step
    "algo.engine": "reference",
    "algo.log_every": 1,
    "algo.exact_grad": False,
    "algo.policy_sigma": 0.5,  # gaussian policy std (continuous chain)
    "utility.kind": None,  # log_barrier on the 8x8 lake, linear elsewhere
    "utility.sigma": 0.125,
    "schedule.T": 3000,
    "schedule.alpha0": 3.0,  # constant step for vanilla_pg and linfa_pg
    "schedule.kind": "fos",
    "schedule.exponent": 0.9,
    "schedule.horizon": None,  # ceil(log(T+1)/(1-gamma))
    "linfa.N": 32,
    "linfa.K": 2000,
    "linfa.beta": None,  # 1/(8 B^2)
    "linfa.features": "one_hot",
    "linfa.probe": "truncated",
    "linfa.fit": "sgd",
    "linfa.feature_dim": 32,
    "seeds": "0,1,2,3,4",
    "out_dir": "runs",
}

_INT_KEYS = {"algo.batch_size", "algo.log_every", "schedule.T", "schedule.horizon", "linfa.N", "linfa.K",
             "linfa.feature_dim"}
_FLOAT_KEYS = {"env.slip", "env.gamma", "algo.policy_sigma", "utility.sigma", "schedule.alpha0",
               "schedule.exponent", "linfa.beta"}
_BOOL_KEYS = {"algo.exact_grad"}


@dataclass
class ExperimentConfig:
    values: dict
    seeds: list = field(default_factory=list)

    def __getitem__(self, key):
        return self.values[key]

    @property
    def out_dir(self) -> Path:
        return Path(self.values["out_dir"])

    def resolved_text(self) -> str:
        return "".join(f"{k}={_render(v)}\n" for k, v in sorted(self.values.items()))


def _render(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _convert(key: str, raw: str):
    raw = raw.strip()
    if raw == "":
        return None
    try:
        if key in _INT_KEYS:
            return int(raw)
        if key in _FLOAT_KEYS:
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: expected a number, got {raw!r}") from None
    if key in _BOOL_KEYS:
        if raw.lower() not in ("true", "false", "1", "0"):
            raise ConfigError(f"{key}: expected true or false, got {raw!r}")
        return raw.lower() in ("true", "1")
    return raw


def parse_seeds(text: str) -> list:
    try:
        seeds = [int(x) for x in str(text).replace(" ", "").split(",") if x]
    except ValueError:
        raise ConfigError(f"seeds: expected comma-separated integers, got {text!r}") from None
    if not seeds:
        raise ConfigError("seeds: need at least one seed")
    for s in seeds:
        if not 0 <= s < 2**64:
            raise ConfigError(f"seeds: {s} does not fit in 64 unsigned bits")
    if len(set(seeds)) != len(seeds):
        raise ConfigError("seeds: duplicates would overwrite each other's logs")
    return seeds


def parse_config(text: str, overrides: Optional[dict] = None) -> ExperimentConfig:
    """Parse ``key = value`` lines ('#' starts a comment) and fill in defaults."""
    values = dict(DEFAULTS)
    given = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, raw = (x.strip() for x in line.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        given[key] = raw
    for key, raw in {**given, **(overrides or {})}.items():
        if key not in DEFAULTS:
            raise ConfigError(f"unknown key {key!r}")
        values[key] = _convert(key, raw) if isinstance(raw, str) else raw
    cfg = ExperimentConfig(values, parse_seeds(values["seeds"]))
    _resolve(cfg)
    return cfg


def load_config(path, overrides: Optional[dict] = None) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, overrides)


# -- environments -------------------------------------------------------------


@dataclass
class Environment:
    name: str
    mdp: Optional[TabularMdp] = None
    reward: Optional[np.ndarray] = None
    grid: object = None
    chain: Optional[ContinuousChain] = None


def _chain2_reward() -> np.ndarray:
    return np.array([[1.0, 0.0], [0.0, 2.0]])


def build_env(values: dict) -> Environment:
    name = values["env.name"]
    gamma = values["env.gamma"]
    if name == "gridworld_8x8_slippery":
        spec = frozen_lake_8x8(slip=1.0 / 3.0 if values["env.slip"] is None else values["env.slip"],
                               gamma=0.9 if gamma is None else gamma, start_dist=values["env.start"])
        return Environment(name, build_gridworld(spec), goal_reward(spec), spec)
    if name == "gridworld_5x5_reward":
        spec = gridworld_5x5(slip=0.0 if values["env.slip"] is None else values["env.slip"],
                             gamma=0.9 if gamma is None else gamma, start_dist=values["env.start"])
        return Environment(name, build_gridworld(spec), goal_reward(spec), spec)
    if name == "chain_2state":
        return Environment(name, chain_2state(0.8 if gamma is None else gamma), _chain2_reward())
    if name == "continuous_chain_1d":
        return Environment(name, chain=ContinuousChain(discount=0.9 if gamma is None else gamma))
    path = Path(name)
    if not path.exists():
        raise ConfigError(f"env.name: {name!r} is neither a built-in ({', '.join(BUILTIN_ENVS)}) nor an existing file")
    try:
        mdp = load_mdp(path)
        doc = json.loads(path.read_text())
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"env.name: invalid MDP file {name}: {exc}") from None
    reward = None
    if "reward" in doc:
        reward = np.asarray(doc["reward"], dtype=np.float64).reshape(mdp.num_states, mdp.num_actions)
    return Environment(path.stem, mdp, reward)


def _resolve(cfg: ExperimentConfig) -> None:
    """Fill derived defaults and reject unusable combinations with a ConfigError."""
    v = cfg.values
    if v["algo.name"] not in ALGORITHMS:
        raise ConfigError(f"algo.name: unknown algorithm {v['algo.name']!r}; expected one of {ALGORITHMS}")
    if v["env.start"] not in ("cells", "uniform"):
        raise ConfigError(f"env.start: expected 'cells' or 'uniform', got {v['env.start']!r}")
    env = build_env(v)
    if v["utility.kind"] is None:
        v["utility.kind"] = "log_barrier" if env.name == "gridworld_8x8_slippery" else "linear"
    if v["utility.kind"] not in ("linear", "log_barrier"):
        raise ConfigError(f"utility.kind: unknown utility {v['utility.kind']!r}")
    if env.chain is not None:
        if v["algo.name"] != "nvrpg_standard" or v["utility.kind"] != "linear":
            raise ConfigError("algo.name: the continuous chain supports only nvrpg_standard with a linear utility")
    elif v["utility.kind"] == "linear" and env.reward is None:
        raise ConfigError("utility.kind: linear utility needs a reward (MDP file has no 'reward' field)")
    if v["algo.name"] == "nvrpg_standard" and v["utility.kind"] != "linear":
        raise ConfigError("algo.name: nvrpg_standard optimizes cumulative reward; set utility.kind=linear")
    if v["schedule.kind"] not in alg.SCHEDULES:
        raise ConfigError(f"schedule.kind: expected one of {alg.SCHEDULES}, got {v['schedule.kind']!r}")
    if v["schedule.T"] is None or v["schedule.T"] < 1:
        raise ConfigError("schedule.T: must be >= 1")
    if v["schedule.alpha0"] is None or not v["schedule.alpha0"] > 0:
        raise ConfigError("schedule.alpha0: must be positive")
    if v["linfa.probe"] not in linfa.PROBES:
        raise ConfigError(f"linfa.probe: expected one of {linfa.PROBES}")
    if v["linfa.fit"] not in linfa.FITS:
        raise ConfigError(f"linfa.fit: expected one of {linfa.FITS}")
    if v["algo.engine"] not in ("reference", "fused"):
        raise ConfigError("algo.engine: expected 'reference' or 'fused'")
    gamma = env.chain.discount if env.chain is not None else env.mdp.discount
    if v["env.gamma"] is None:
        v["env.gamma"] = gamma
    if v["env.slip"] is None and env.grid is not None:
        v["env.slip"] = env.grid.slip
    if v["schedule.horizon"] is None:
        v["schedule.horizon"] = max(1, math.ceil(math.log(v["schedule.T"] + 1) / (1.0 - gamma)))


# -- running ------------------------------------------------------------------


@dataclass
class SeedResult:
    seed: int
    path: str
    status: str  # "ok" or the abort message


def _policy_init(env: Environment, values: dict) -> PolicyParams:
    if env.chain is not None:
        pol = env.chain.policy(values["algo.policy_sigma"])
        return PolicyParams(np.zeros(pol.dim), pol)
    return PolicyParams(np.zeros(env.mdp.num_states * env.mdp.num_actions),
                        TabularSoftmax(env.mdp.num_states, env.mdp.num_actions))


def _utility(env: Environment, values: dict):
    return make_utility(values["utility.kind"], reward=env.reward, sigma=values["utility.sigma"],
                        num_actions=env.mdp.num_actions)


def run_single(values: dict, seed: int):
    """One seeded run; returns its TrainLog (raises NumericError with a partial log)."""
    env = build_env(values)
    params0 = _policy_init(env, values)
    name = values["algo.name"]
    if name == "linfa_pg":
        util = _utility(env, values)
        phi = linfa.make_features(values["linfa.features"], env.mdp, env.grid, values["linfa.feature_dim"], seed)
        cfg = linfa.LinfaConfig(
            T=values["schedule.T"], N=values["linfa.N"], alpha=values["schedule.alpha0"], K=values["linfa.K"],
            beta=values["linfa.beta"], horizon=values["schedule.horizon"], seed=seed, probe=values["linfa.probe"],
            fit=values["linfa.fit"], log_every=values["algo.log_every"], exact_grad=values["algo.exact_grad"],
        )
        return linfa.run_linfa_pg(env.mdp, params0, util, phi, cfg)
    cfg = alg.NvrpgConfig(
        T=values["schedule.T"], alpha0=values["schedule.alpha0"], schedule=values["schedule.kind"],
        exponent=values["schedule.exponent"], horizon=values["schedule.horizon"], seed=seed,
        batch_size=values["algo.batch_size"], log_every=values["algo.log_every"],
        exact_grad=values["algo.exact_grad"], engine=values["algo.engine"],
    )
    if name == "nvrpg_standard":
        if env.chain is not None:
            return alg.run_nvrpg_standard(ChainTask(env.chain), params0, cfg=cfg)
        return alg.run_nvrpg_standard(env.mdp, params0, env.reward, cfg)
    util = _utility(env, values)
    if name == "nvrpg_general":
        return alg.run_nvrpg_general(env.mdp, params0, util, cfg)
    return alg.run_vanilla_pg(env.mdp, params0, util, cfg)


def _run_and_write(values: dict, seed: int, out_dir: str) -> SeedResult:
    path = Path(out_dir) / f"seed_{seed}.csv"
    # the resolved config rides along in the metadata block
    # (out_dir excluded so a rerun elsewhere still yields byte-identical logs)
    meta = {f"config.{k}": _render(v) for k, v in values.items() if k != "out_dir"}
    try:
        log = run_single(values, seed)
        status = "ok"
    except NumericError as exc:
        log = exc.log
        status = str(exc)
        meta["aborted"] = status
        if log is None:
            path.write_text(f"# aborted={status}\n")
            return SeedResult(seed, str(path), status)
    log.to_csv(path, meta)
    return SeedResult(seed, str(path), status)


def worker_count() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{WORKERS_ENV} must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"{WORKERS_ENV} must be a positive integer, got {raw!r}")
    return n


@dataclass
class ExperimentResult:
    out_dir: Path
    seeds: list
    summary_path: Optional[Path]

    @property
    def ok(self) -> bool:
        return all(r.status == "ok" for r in self.seeds)


def run_experiment(config: ExperimentConfig, out_dir=None) -> ExperimentResult:
    out = Path(out_dir) if out_dir is not None else config.out_dir
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved").write_text(config.resolved_text())
    workers = min(worker_count(), len(config.seeds))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_run_and_write, config.values, s, str(out)) for s in config.seeds]
            results = [f.result() for f in futures]
    else:
        results = [_run_and_write(config.values, s, str(out)) for s in config.seeds]
    summary = out / "summary.csv"
    write_summary([r.path for r in results], summary)
    return ExperimentResult(out, results, summary)


# -- summaries ----------------------------------------------------------------


def write_summary(csv_paths, dest) -> Path:
    """Per-t median and quartiles across seeds for each metric column.

    Rows are keyed by t; a seed that aborted early simply stops contributing.
    Quantiles use numpy's default (linear interpolation) rule.
    """
    per_t: dict = {}
    for path in csv_paths:
        _, header, rows = alg.read_csv(path)
        if header is None:
            continue
        idx = {c: header.index(c) for c in SUMMARY_COLUMNS if c in header}
        for row in rows:
            bucket = per_t.setdefault(int(row[0]), {c: [] for c in SUMMARY_COLUMNS})
            for c, j in idx.items():
                if row[j] is not None:
                    bucket[c].append(row[j])
    cols = ["t", "num_seeds"] + [f"{c}_{q}" for c in SUMMARY_COLUMNS for q in ("q25", "median", "q75")]
    lines = [",".join(cols)]
    for t in sorted(per_t):
        bucket = per_t[t]
        out = [str(t), str(max(len(v) for v in bucket.values()))]
        for c in SUMMARY_COLUMNS:
            vals = bucket[c]
            if vals:
                q = np.quantile(np.array(vals), [0.25, 0.5, 0.75])
                out += [repr(float(x)) for x in q]
            else:
                out += ["", "", ""]
        lines.append(",".join(out))
    Path(dest).write_text("\n".join(lines) + "\n")
    return Path(dest)
