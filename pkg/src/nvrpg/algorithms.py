"""Normalized variance-reduced policy gradient (general utilities and cumulative
reward), a vanilla policy-gradient baseline, schedules, logs and checkpoints."""

from __future__ import annotations

import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from nvrpg import __version__, kernels
from nvrpg._backend import get_backend
from nvrpg.errors import ISWeightBoundError, NumericError
from nvrpg.estimators import log_is_weights, pg_from_paths
from nvrpg.mdp import TabularMdp, exact_occupancy, make_rng, q_values, sample_batch
from nvrpg.policy import PolicyParams, TabularSoftmax, normalized_step

SCHEMA_VERSION = 1
COLUMNS = (
    "t", "steps", "alpha_t", "eta_t", "F_exact", "J_exact", "grad_norm_exact",
    "d_norm", "is_weight", "is_bound",
)
SCHEDULES = ("fos", "global", "harmonic")
# slack on the log-scale IS bound check, covers summation rounding only
_LOG_BOUND_SLACK = 1e-9


@dataclass
class NvrpgConfig:
    T: int
    alpha0: float
    schedule: str = "fos"
    exponent: float = 0.9  # the a in alpha0 / (T+1)^a for the global schedule
    horizon: Optional[int] = None
    seed: int = 0
    batch_size: int = 1  # vanilla PG only
    log_every: int = 1
    exact_grad: bool = False
    keep_iterates: bool = False
    checkpoint_every: int = 0
    checkpoint_path: Optional[str] = None
    engine: str = "reference"  # "fused": compiled loop for tabular softmax, general utilities

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if not self.alpha0 > 0:
            raise ValueError("alpha0 must be positive")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}, got {self.schedule!r}")
        if self.schedule == "global" and not 0.0 < self.exponent < 1.0:
            raise ValueError("global schedule exponent must lie in (0, 1)")
        if self.horizon is not None and self.horizon < 1:
            raise ValueError("horizon override must be >= 1")
        if self.batch_size < 1 or self.log_every < 1:
            raise ValueError("batch_size and log_every must be >= 1")
        if self.engine not in ("reference", "fused"):
            raise ValueError(f"engine must be 'reference' or 'fused', got {self.engine!r}")

    def horizon_for(self, gamma: float) -> int:
        if self.horizon is not None:
            return int(self.horizon)
        return max(1, math.ceil(math.log(self.T + 1) / (1.0 - gamma)))


def schedule(cfg: NvrpgConfig, t: int) -> tuple[float, float]:
    """(alpha_t, eta_t) for iteration t in [0, T].

    eta_0 is reported as 1: the first direction is the plain gradient estimate.
    """
    if not 0 <= t <= cfg.T:
        raise ValueError(f"t={t} outside [0, {cfg.T}]")
    if cfg.schedule == "fos":
        alpha = cfg.alpha0 * cfg.T ** (-2.0 / 3.0)
        eta = (2.0 / (t + 1)) ** (2.0 / 3.0)
    elif cfg.schedule == "global":
        alpha = cfg.alpha0 * (cfg.T + 1) ** (-cfg.exponent)
        eta = 2.0 / (t + 1)
    else:
        alpha = cfg.alpha0 / max(t, 1)
        eta = 2.0 / (t + 1)
    return alpha, min(eta, 1.0)


# -- exact evaluation (tabular) -----------------------------------------------


def exact_objective(mdp: TabularMdp, params: PolicyParams, utility) -> float:
    return utility.value(exact_occupancy(mdp, params).values)


def exact_gradient(mdp: TabularMdp, params: PolicyParams, utility) -> np.ndarray:
    """grad_theta F(lambda(theta)) = sum_{s,a} lambda(s,a) Q_r(s,a) score(s,a), r = grad F."""
    lam = exact_occupancy(mdp, params).values
    r = utility.grad(lam)
    q = q_values(mdp, params.probs(), r)
    return params.contract(lam * q)


class TabularTask:
    bounded_weights = True

    def __init__(self, mdp: TabularMdp, utility, exact_grad: bool = False):
        self.mdp = mdp
        self.utility = utility
        self.discount = mdp.discount
        self.exact_grad = exact_grad

    def sample(self, params, horizon, rng):
        return sample_batch(self.mdp, params, horizon, 1, rng)

    def policy_gradient(self, paths, params, discounts, reward=None):
        states, actions = paths
        reward = self.utility.reward if reward is None else reward
        return pg_from_paths(states, actions, params, reward[states, actions], discounts)

    def log_weights(self, paths, new, old):
        return log_is_weights(paths[0], paths[1], new, old)

    def evaluate(self, params):
        lam = exact_occupancy(self.mdp, params).values
        f = self.utility.value(lam)
        j = f if self.utility.linear else None
        g = None
        if self.exact_grad:
            g = float(np.linalg.norm(exact_gradient(self.mdp, params, self.utility)))
        return f, j, g


# -- training log -------------------------------------------------------------


@dataclass
class TrainLog:
    columns: tuple = COLUMNS
    rows: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)
    theta: Optional[np.ndarray] = None
    iterates: Optional[list] = None

    def append(self, **values):
        self.rows.append(tuple(values.get(c) for c in self.columns))

    def column(self, name: str) -> np.ndarray:
        j = self.columns.index(name)
        return np.array([np.nan if r[j] is None else r[j] for r in self.rows], dtype=np.float64)

    def last(self, name: str):
        return self.rows[-1][self.columns.index(name)]

    def random_iterate(self, rng: np.random.Generator) -> np.ndarray:
        """theta_bar_T: uniform draw from theta_1..theta_T (needs keep_iterates)."""
        if not self.iterates:
            raise ValueError("run was made without keep_iterates")
        return self.iterates[1 + int(rng.integers(len(self.iterates) - 1))]

    def to_csv(self, dest=None, meta: Optional[dict] = None) -> str:
        """Render as CSV with a ``# key=value`` metadata preamble; write to ``dest`` if given."""
        buf = io.StringIO()
        for key, val in sorted({**self.meta, **(meta or {})}.items()):
            buf.write(f"# {key}={_fmt_meta(val)}\n")
        buf.write(",".join(self.columns + ("schema_version",)) + "\n")
        for row in self.rows:
            buf.write(",".join(_fmt(v) for v in row) + f",{SCHEMA_VERSION}\n")
        text = buf.getvalue()
        if dest is not None:
            Path(dest).write_text(text)
        return text


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    return "" if math.isnan(v) else repr(v)


def _fmt_meta(v) -> str:
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple, dict)):
        return json.dumps(v, sort_keys=True)
    return str(v)


def read_csv(path):
    """Parse a TrainLog CSV back into (meta dict, header list, rows of floats/None)."""
    meta, header, rows = {}, None, []
    for line in Path(path).read_text().splitlines():
        if line.startswith("#"):
            key, _, val = line[2:].partition("=")
            meta[key] = val
        elif header is None:
            header = line.split(",")
        else:
            rows.append([None if x == "" else float(x) for x in line.split(",")])
    return meta, header, rows


# -- checkpoints --------------------------------------------------------------

CHECKPOINT_FORMAT = "nvrpg-checkpoint/1"


def _encode(v):
    if isinstance(v, np.ndarray):
        return {"__ndarray__": v.tolist(), "dtype": str(v.dtype), "shape": list(v.shape)}
    if isinstance(v, dict):
        return {k: _encode(x) for k, x in v.items()}
    if isinstance(v, (np.integer,)):
        return int(v)
    return v


def _decode(v):
    if isinstance(v, dict):
        if "__ndarray__" in v:
            return np.array(v["__ndarray__"], dtype=v["dtype"]).reshape(v["shape"])
        return {k: _decode(x) for k, x in v.items()}
    return v


def save_checkpoint(path, state: dict) -> None:
    doc = {"format": CHECKPOINT_FORMAT, "state": _encode(state)}
    Path(path).write_text(json.dumps(doc, sort_keys=True))


def load_checkpoint(path) -> dict:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {doc.get('format')!r}")
    return _decode(doc["state"])


def _rng_from_state(state: dict) -> np.random.Generator:
    rng = make_rng(0)
    rng.bit_generator.state = state
    return rng


# -- shared loop plumbing -----------------------------------------------------


class _Run:
    """Bookkeeping shared by the training loops: rows, evaluation, invariants."""

    def __init__(self, cfg, task, algorithm: str, horizon: int, extra_columns=()):
        self.cfg = cfg
        self.task = task
        self.horizon = horizon
        self.log = TrainLog(columns=COLUMNS + tuple(extra_columns))
        self.log.meta.update(
            algorithm=algorithm, horizon=horizon, seed=cfg.seed, T=cfg.T,
            artifact_version=__version__, schema_version=SCHEMA_VERSION,
        )
        self.max_step_error = 0.0
        self.zero_steps = 0
        self.max_log_ratio = -np.inf  # max of log(w) - log(bound)
        if cfg.keep_iterates:
            self.log.iterates = []

    def should_log(self, t: int) -> bool:
        return (t + 1) % self.cfg.log_every == 0 or t == self.cfg.T - 1

    def step(self, theta, direction, alpha):
        new = normalized_step(theta, direction, alpha)
        if np.linalg.norm(direction) > 0:
            self.max_step_error = max(self.max_step_error, abs(np.linalg.norm(new - theta) - alpha))
        else:
            self.zero_steps += 1
        return new

    def check_weight(self, log_w: float, alpha_prev: float, t: int):
        if not self.task.bounded_weights:
            return math.exp(log_w), None
        log_bound = 2.0 * self.horizon * self.l_psi * alpha_prev
        self.max_log_ratio = max(self.max_log_ratio, log_w - log_bound)
        if log_w > log_bound + _LOG_BOUND_SLACK:
            self.finish(None)
            raise ISWeightBoundError(
                f"iteration {t}: IS weight exp({log_w:.6g}) exceeds bound exp({log_bound:.6g})",
                self.log,
            )
        return math.exp(log_w), math.exp(log_bound)

    def record(self, t, steps, params, alpha, eta, d_norm, w=None, bound=None, **extra):
        if self.cfg.keep_iterates:
            self.log.iterates.append(params.theta.copy())
        if not self.should_log(t):
            return
        f, j, g = self.task.evaluate(params)
        self.log.append(
            t=t, steps=steps, alpha_t=alpha, eta_t=eta, F_exact=f, J_exact=j,
            grad_norm_exact=g, d_norm=d_norm, is_weight=w, is_bound=bound, **extra,
        )

    def finish(self, theta):
        if theta is not None:
            self.log.theta = np.array(theta)
        self.log.meta.update(
            max_step_error=float(self.max_step_error),
            zero_direction_steps=self.zero_steps,
        )
        if self.task.bounded_weights and np.isfinite(self.max_log_ratio):
            self.log.meta["max_log_weight_minus_log_bound"] = float(self.max_log_ratio)
        return self.log

    def maybe_checkpoint(self, t_next: int, state: dict):
        cfg = self.cfg
        if cfg.checkpoint_every and cfg.checkpoint_path and t_next % cfg.checkpoint_every == 0:
            save_checkpoint(cfg.checkpoint_path, state)


def _initial_record(run, params0):
    if run.cfg.keep_iterates:
        run.log.iterates.append(params0.theta.copy())
    f, j, _ = run.task.evaluate(params0)
    run.log.meta["F_initial"] = f
    if j is not None:
        run.log.meta["J_initial"] = j


# -- N-VR-PG, general utilities -----------------------------------------------


def run_nvrpg_general(mdp: TabularMdp, params0: PolicyParams, utility, cfg: NvrpgConfig,
                      resume: Optional[dict] = None) -> TrainLog:
    """N-VR-PG for a general utility F of the occupancy measure.

    One H-step trajectory per iteration feeds two recursive-momentum estimators:
    one for the occupancy measure (whose F-gradient serves as the reward) and one
    for the policy gradient.  Steps are normalized to length alpha_t.
    """
    if not params0.param.discrete:
        raise ValueError("general-utility N-VR-PG needs a softmax policy")
    H = cfg.horizon_for(mdp.discount)
    disc = mdp.discounts(H)
    n_s, n_a = mdp.num_states, mdp.num_actions
    task = TabularTask(mdp, utility, cfg.exact_grad)
    run = _Run(cfg, task, "nvrpg_general", H)
    run.l_psi = params0.constants.l_psi
    sigma = getattr(utility, "sigma", None)
    min_lam = np.inf

    def occupancy_guard(lam, t):
        if sigma is not None and np.min(lam.sum(axis=1)) < -sigma / 2:
            run.finish(None)
            raise NumericError(f"iteration {t}: occupancy row sum fell below -sigma/2", run.log)

    def reward_guard(r, t):
        if not np.all(np.isfinite(r)):
            run.finish(None)
            raise NumericError(f"iteration {t}: non-finite utility gradient", run.log)

    if resume is None:
        rng = make_rng(cfg.seed)
        params = params0
        _initial_record(run, params)
        paths = sample_batch(mdp, params, H, 1, rng)
        lam = kernels.discounted_counts(paths[0], paths[1], disc, n_s, n_a)
        r_cur = utility.grad(lam)
        reward_guard(r_cur, 0)
        r_prev = r_cur
        d = pg_from_paths(paths[0], paths[1], params, r_cur[paths], disc)
        alpha, eta = schedule(cfg, 0)
        prev, params = params, params.with_theta(run.step(params.theta, d, alpha))
        steps = H
        run.record(0, steps, params, alpha, eta, float(np.linalg.norm(d)))
        t_start = 1
    else:
        rng = _rng_from_state(resume["rng"])
        params = params0.with_theta(resume["theta"])
        prev = params0.with_theta(resume["theta_prev"])
        lam, d = resume["lam"], resume["d"]
        r_cur, r_prev = resume["r_cur"], resume["r_prev"]
        steps, alpha, t_start = int(resume["steps"]), float(resume["alpha_prev"]), int(resume["t"])
        run.log.meta["resumed_from"] = t_start

    if _use_fused(cfg, params0, utility):
        state = dict(theta=params.theta.copy(), theta_prev=prev.theta.copy(), lam=lam.copy(),
                     d=np.array(d, dtype=np.float64), r_cur=np.array(r_cur), r_prev=np.array(r_prev))
        steps, min_lam = _fused_general_loop(mdp, params0, utility, cfg, run, rng, state, t_start,
                                             alpha, steps, disc, min_lam)
        params = params0.with_theta(state["theta"])
        t_start = cfg.T

    for t in range(t_start, cfg.T):
        run.maybe_checkpoint(t, dict(
            t=t, theta=params.theta, theta_prev=prev.theta, lam=lam, d=d, r_cur=r_cur,
            r_prev=r_prev, steps=steps, alpha_prev=alpha, rng=rng.bit_generator.state,
        ))
        alpha_prev = alpha
        alpha, eta = schedule(cfg, t)
        paths = sample_batch(mdp, params, H, 1, rng)
        steps += H
        lam_tau = kernels.discounted_counts(paths[0], paths[1], disc, n_s, n_a)
        w, bound = run.check_weight(float(log_is_weights(paths[0], paths[1], prev, params)[0]), alpha_prev, t)
        lam = eta * lam_tau + (1.0 - eta) * (lam + lam_tau * (1.0 - w))
        min_lam = min(min_lam, float(lam.min()))
        occupancy_guard(lam, t)
        r_new = utility.grad(lam)
        reward_guard(r_new, t)
        g_cur = pg_from_paths(paths[0], paths[1], params, r_cur[paths], disc)
        g_old = pg_from_paths(paths[0], paths[1], prev, r_prev[paths], disc)
        v = g_cur - w * g_old
        d = eta * g_cur + (1.0 - eta) * (d + v)
        prev, params = params, params.with_theta(run.step(params.theta, d, alpha))
        r_prev, r_cur = r_cur, r_new
        run.record(t, steps, params, alpha, eta, float(np.linalg.norm(d)), w, bound)

    run.log.meta["min_lambda_entry"] = float(min_lam) if np.isfinite(min_lam) else 0.0
    run.log.meta["total_steps"] = steps
    return run.finish(params.theta)


def _use_fused(cfg, params0, utility) -> bool:
    if cfg.engine != "fused":
        return False
    from nvrpg.utilities import LinearUtility, LogBarrierUtility

    if not isinstance(params0.param, TabularSoftmax) or not isinstance(utility, (LinearUtility, LogBarrierUtility)):
        raise ValueError("the fused engine supports tabular softmax with linear or log_barrier utilities")
    if cfg.checkpoint_every:
        raise ValueError("the fused engine does not write checkpoints")
    # without numba the reference loop is the faster pure-numpy path
    return get_backend() == "numba"


_FUSED_CHUNK = 4096


def _fused_general_loop(mdp, params0, utility, cfg, run, rng, state, t_start, alpha, steps, disc, min_lam):
    """Iterations t_start..T-1 through the compiled kernel, in chunks of pre-drawn uniforms.

    Drawing (c, H, 2) uniforms at once consumes the generator exactly like c
    successive (1, H, 2) draws, so the trajectory stream matches the reference loop.
    """
    H = run.horizon
    sigma = float(getattr(utility, "sigma", 0.0)) if not utility.linear else 0.0
    log_bound_coef = 2.0 * H * run.l_psi
    t = t_start
    alpha_prev = alpha
    while t < cfg.T:
        n = min(_FUSED_CHUNK, cfg.T - t)
        ts = np.arange(t, t + n)
        sched = np.array([schedule(cfg, int(k)) for k in ts])
        alphas, etas = sched[:, 0].copy(), sched[:, 1].copy()
        mask = np.array([cfg.keep_iterates or run.should_log(int(k)) for k in ts])
        snaps = np.empty((int(mask.sum()), state["theta"].size))
        u = rng.random((n, H, 2))
        status, done, log_w, d_norm, err, chunk_min, zeros = kernels.nvrpg_tabular_chunk(
            state["theta"], state["theta_prev"], state["lam"], state["d"], state["r_cur"],
            state["r_prev"], u, alphas, etas, alpha_prev, mdp.cum_initial, mdp.cum_transition,
            disc, sigma, log_bound_coef, mask, snaps,
        )
        min_lam = min(min_lam, float(chunk_min))
        run.zero_steps += int(zeros)
        if done:
            run.max_step_error = max(run.max_step_error, float(err[:done].max()))
        k = 0
        for j in range(done):
            tj = int(ts[j])
            log_bound = log_bound_coef * (alpha_prev if j == 0 else alphas[j - 1])
            run.max_log_ratio = max(run.max_log_ratio, float(log_w[j]) - log_bound)
            if not mask[j]:
                continue
            theta_j = params0.with_theta(snaps[k])
            k += 1
            run.record(tj, steps + (j + 1) * H, theta_j, float(alphas[j]), float(etas[j]), float(d_norm[j]),
                       math.exp(log_w[j]), math.exp(log_bound))
        steps += done * H
        if status != kernels.FUSED_OK:
            tj = int(ts[done])
            run.log.meta["min_lambda_entry"] = float(min_lam)
            run.finish(None)
            if status == kernels.FUSED_WEIGHT_BOUND:
                raise ISWeightBoundError(f"iteration {tj}: IS weight exp({log_w[done]:.6g}) exceeds its bound", run.log)
            if status == kernels.FUSED_ROW_GUARD:
                raise NumericError(f"iteration {tj}: occupancy row sum fell below -sigma/2", run.log)
            raise NumericError(f"iteration {tj}: non-finite utility gradient or direction", run.log)
        alpha_prev = float(alphas[-1])
        t += n
    return steps, min_lam


# -- N-VR-PG, cumulative reward -----------------------------------------------


def run_nvrpg_standard(env, params0: PolicyParams, reward=None, cfg: NvrpgConfig = None,
                       resume: Optional[dict] = None) -> TrainLog:
    """N-VR-PG for the cumulative-reward objective.

    ``env`` is a TabularMdp (with an (S, A) ``reward`` table, softmax policy) or a
    chain task exposing ``sample``/``policy_gradient``/``log_weights``/``evaluate``
    (Gaussian policy).
    """
    if isinstance(env, TabularMdp):
        from nvrpg.utilities import LinearUtility

        task = TabularTask(env, LinearUtility(reward), cfg.exact_grad)
    else:
        task = env
    H = cfg.horizon_for(task.discount)
    disc = task.discount ** np.arange(H, dtype=np.float64)
    run = _Run(cfg, task, "nvrpg_standard", H)
    if task.bounded_weights:
        run.l_psi = params0.constants.l_psi

    if resume is None:
        rng = make_rng(cfg.seed)
        params = params0
        _initial_record(run, params)
        paths = task.sample(params, H, rng)
        d = task.policy_gradient(paths, params, disc)
        alpha, eta = schedule(cfg, 0)
        prev, params = params, params.with_theta(run.step(params.theta, d, alpha))
        steps = H
        run.record(0, steps, params, alpha, eta, float(np.linalg.norm(d)))
        t_start = 1
    else:
        rng = _rng_from_state(resume["rng"])
        params = params0.with_theta(resume["theta"])
        prev = params0.with_theta(resume["theta_prev"])
        d = resume["d"]
        steps, alpha, t_start = int(resume["steps"]), float(resume["alpha_prev"]), int(resume["t"])
        run.log.meta["resumed_from"] = t_start

    for t in range(t_start, cfg.T):
        run.maybe_checkpoint(t, dict(
            t=t, theta=params.theta, theta_prev=prev.theta, d=d, steps=steps,
            alpha_prev=alpha, rng=rng.bit_generator.state,
        ))
        alpha_prev = alpha
        alpha, eta = schedule(cfg, t)
        paths = task.sample(params, H, rng)
        steps += H
        w, bound = run.check_weight(float(task.log_weights(paths, prev, params)[0]), alpha_prev, t)
        g_cur = task.policy_gradient(paths, params, disc)
        g_old = task.policy_gradient(paths, prev, disc)
        v = g_cur - w * g_old
        d = eta * g_cur + (1.0 - eta) * (d + v)
        prev, params = params, params.with_theta(run.step(params.theta, d, alpha))
        run.record(t, steps, params, alpha, eta, float(np.linalg.norm(d)), w, bound)

    run.log.meta["total_steps"] = steps
    return run.finish(params.theta)


# -- vanilla stochastic PG baseline -------------------------------------------


def run_vanilla_pg(mdp: TabularMdp, params0: PolicyParams, utility, cfg: NvrpgConfig) -> TrainLog:
    """Minibatch REINFORCE with plug-in occupancy estimate and constant step alpha0.

    Each iteration: N trajectories, lambda_hat = batch mean of lambda(tau),
    r = grad F(lambda_hat), theta += alpha0 * batch-mean gradient (no normalization).
    """
    H = cfg.horizon_for(mdp.discount)
    disc = mdp.discounts(H)
    n = cfg.batch_size
    task = TabularTask(mdp, utility, cfg.exact_grad)
    task.bounded_weights = False
    run = _Run(cfg, task, "vanilla_pg", H)
    rng = make_rng(cfg.seed)
    params = params0
    _initial_record(run, params)
    steps = 0
    for t in range(cfg.T):
        states, actions = sample_batch(mdp, params, H, n, rng)
        steps += n * H
        lam_hat = kernels.discounted_counts(states, actions, disc, mdp.num_states, mdp.num_actions) / n
        r = utility.grad(lam_hat)
        if not np.all(np.isfinite(r)):
            run.finish(None)
            raise NumericError(f"iteration {t}: non-finite utility gradient", run.log)
        g = pg_from_paths(states, actions, params, r[states, actions], disc) / n
        params = params.with_theta(params.theta + cfg.alpha0 * g)
        run.record(t, steps, params, cfg.alpha0, None, float(np.linalg.norm(g)))
    run.log.meta["total_steps"] = steps
    return run.finish(params.theta)


def config_dict(cfg: NvrpgConfig) -> dict:
    return asdict(cfg)
