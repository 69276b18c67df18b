"""Occupancy-measure regression with linear features and the stochastic PG loop built on it.

The occupancy lambda_H(s, a) is approximated by <phi(s, a), omega>.  omega is fitted
by averaged SGD on Monte-Carlo probes drawn with s ~ rho, a ~ Uniform(A); the
outer loop then takes plain (unnormalized) policy-gradient steps whose reward
r = grad F(lambda_hat) is only ever evaluated at the pairs a batch visits.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from nvrpg import kernels
from nvrpg.algorithms import TabularTask, _initial_record, _Run
from nvrpg.errors import NumericError
from nvrpg.estimators import geometric_rollout_hits, pg_from_paths
from nvrpg.mdp import TabularMdp, exact_occupancy, make_rng, sample_batch
from nvrpg.policy import PolicyParams

LINFA_COLUMNS = ("K", "final_avg_loss", "fit_residual_at_visited")
PROBES = ("truncated", "geometric")
FITS = ("sgd", "exact")


# -- feature maps -------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """phi(s, a) stored as a dense (S, A, m) table.

    ``bound`` is max ||phi(s, a)||.  ``mu`` is the minimum eigenvalue of
    E_{s~rho, a~U}[phi phi^T] when it is known to be positive, else None.
    """

    table: np.ndarray
    name: str
    bound: float
    mu: Optional[float] = None

    def __post_init__(self):
        t = np.array(self.table, dtype=np.float64)
        if t.ndim != 3:
            raise ValueError("feature table must have shape (S, A, m)")
        t.setflags(write=False)
        object.__setattr__(self, "table", t)

    @property
    def dim(self) -> int:
        return self.table.shape[2]

    def __call__(self, s, a) -> np.ndarray:
        return self.table[s, a]

    def predict(self, omega: np.ndarray, s, a) -> np.ndarray:
        """<phi(s, a), omega> at index arrays, without forming the full table product."""
        return self.table[s, a] @ omega

    def predict_all(self, omega: np.ndarray) -> np.ndarray:
        return self.table @ omega


def one_hot(num_states: int, num_actions: int, rho: Optional[np.ndarray] = None) -> FeatureMap:
    """Tabular indicator features: m = |S| |A|, B = 1, mu = min_s rho(s) / |A|."""
    m = num_states * num_actions
    table = np.eye(m).reshape(num_states, num_actions, m)
    mu = None
    if rho is not None:
        mu = float(np.min(rho)) / num_actions
    return FeatureMap(table, "one_hot", 1.0, mu)


def tile_coded(spec, tile: int = 2) -> FeatureMap:
    """Indicator of (tile x tile block of the grid, action); the terminal state gets its own block.

    Cells sharing a block share a feature, so this map has a genuine approximation error.
    """
    if tile < 1:
        raise ValueError("tile size must be >= 1")
    n_a = 4
    tiles_r = math.ceil(spec.rows / tile)
    tiles_c = math.ceil(spec.cols / tile)
    n_blocks = tiles_r * tiles_c + int(spec.has_terminal)
    table = np.zeros((spec.num_states, n_a, n_blocks * n_a))
    for r in range(spec.rows):
        for c in range(spec.cols):
            block = (r // tile) * tiles_c + c // tile
            for a in range(n_a):
                table[spec.index((r, c)), a, block * n_a + a] = 1.0
    if spec.has_terminal:
        for a in range(n_a):
            table[spec.num_states - 1, a, (n_blocks - 1) * n_a + a] = 1.0
    return FeatureMap(table, f"tile{tile}", 1.0)


def random_projection(num_states: int, num_actions: int, dim: int, seed: int = 0) -> FeatureMap:
    """phi(s, a) = G e_{(s,a)} with G having i.i.d. N(0, 1/m) entries."""
    if dim < 1:
        raise ValueError("feature dimension must be >= 1")
    g = make_rng(seed).standard_normal((num_states * num_actions, dim)) / math.sqrt(dim)
    table = g.reshape(num_states, num_actions, dim)
    return FeatureMap(table, f"randproj{dim}", float(np.linalg.norm(table, axis=2).max()))


def make_features(name: str, mdp: TabularMdp, spec=None, dim: int = 32, seed: int = 0) -> FeatureMap:
    if name == "one_hot":
        return one_hot(mdp.num_states, mdp.num_actions, mdp.initial_dist)
    if name.startswith("tile"):
        if spec is None:
            raise ValueError("tile-coded features need a grid environment")
        return tile_coded(spec, int(name[4:] or 2))
    if name == "random_projection":
        return random_projection(mdp.num_states, mdp.num_actions, dim, seed)
    raise ValueError(f"unknown feature map {name!r}")


def feature_covariance(mdp: TabularMdp, phi: FeatureMap) -> np.ndarray:
    """E_{s~rho, a~U}[phi(s, a) phi(s, a)^T]."""
    w = np.repeat(mdp.initial_dist / mdp.num_actions, mdp.num_actions)
    flat = phi.table.reshape(-1, phi.dim)
    return (flat * w[:, None]).T @ flat


# -- regression ---------------------------------------------------------------


def stochastic_reg_grad(omega: np.ndarray, pair, lam_hat: float, phi: FeatureMap) -> np.ndarray:
    """2 (<phi(s, a), omega> - lam_hat) phi(s, a)."""
    omega = np.asarray(omega, dtype=np.float64)
    if omega.shape != (phi.dim,):
        raise ValueError(f"omega has shape {omega.shape}, features have dimension {phi.dim}")
    f = phi(*pair)
    return 2.0 * (float(f @ omega) - float(lam_hat)) * f


def regression_loss(mdp: TabularMdp, policy, omega: np.ndarray, phi: FeatureMap, horizon: int) -> float:
    """Population loss sum_s rho(s) (1/|A|) sum_a (lambda_H(s, a) - <phi(s, a), omega>)^2."""
    lam = exact_occupancy(mdp, policy, horizon).values
    resid = lam - phi.predict_all(np.asarray(omega, dtype=np.float64))
    return float(mdp.initial_dist @ (resid**2).mean(axis=1))


def best_fit(mdp: TabularMdp, policy, phi: FeatureMap, horizon: int) -> np.ndarray:
    """A minimizer of regression_loss (weighted least squares, minimum norm)."""
    lam = exact_occupancy(mdp, policy, horizon).values.ravel()
    w = np.sqrt(np.repeat(mdp.initial_dist / mdp.num_actions, mdp.num_actions))
    flat = phi.table.reshape(-1, phi.dim)
    omega, *_ = np.linalg.lstsq(flat * w[:, None], lam * w, rcond=None)
    return omega


@dataclass
class RegressionState:
    omega: np.ndarray  # last iterate omega_K
    average: np.ndarray  # (1/K) sum_{k=1..K} omega_k, the fitted parameter
    iterations: int
    steps: int  # environment steps spent on probes


def sample_regression_pairs(mdp: TabularMdp, k: int, rng: np.random.Generator):
    """s ~ rho, a ~ Uniform(A), from one (k, 2) block of uniforms."""
    u = rng.random((k, 2))
    s = np.minimum(np.searchsorted(mdp.cum_initial, u[:, 0], side="right"), mdp.num_states - 1)
    a = np.minimum((u[:, 1] * mdp.num_actions).astype(np.int64), mdp.num_actions - 1)
    return s.astype(np.int64), a


def sgd_occupancy_fit(mdp: TabularMdp, policy, phi: FeatureMap, K: int, beta: Optional[float] = None,
                      horizon: int = 1, rng: Optional[np.random.Generator] = None, probe: str = "truncated",
                      omega0: Optional[np.ndarray] = None) -> RegressionState:
    """Averaged SGD on the occupancy regression loss.

    ``probe="truncated"`` targets lambda_H with the discounted visit count of one
    H-step rollout per query.  ``probe="geometric"`` targets the untruncated
    lambda: the geometric-horizon hit indicator has mean (1 - gamma) lambda, so
    it is divided by (1 - gamma) here.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    if probe not in PROBES:
        raise ValueError(f"probe must be one of {PROBES}, got {probe!r}")
    if rng is None:
        raise ValueError("sgd_occupancy_fit needs an explicit generator")
    beta = 1.0 / (8.0 * phi.bound**2) if beta is None else float(beta)
    if not beta > 0:
        raise ValueError("beta must be positive")
    omega0 = np.zeros(phi.dim) if omega0 is None else np.array(omega0, dtype=np.float64)
    s, a = sample_regression_pairs(mdp, K, rng)
    if probe == "truncated":
        states, actions = sample_batch(mdp, policy, horizon, K, rng)
        targets = kernels.pair_probe(states, actions, s, a, mdp.discounts(horizon))
        steps = K * horizon
    else:
        hits, steps = geometric_rollout_hits(mdp, policy, s, a, rng)
        targets = hits / (1.0 - mdp.discount)
    avg, last = kernels.averaged_sgd(np.ascontiguousarray(phi.table[s, a]), targets, beta, omega0)
    return RegressionState(last, avg, K, int(steps))


# -- outer loop ---------------------------------------------------------------


@dataclass
class LinfaConfig:
    T: int
    N: int
    alpha: float
    K: int
    beta: Optional[float] = None  # default 1 / (8 B^2)
    horizon: Optional[int] = None
    seed: int = 0
    probe: str = "truncated"
    fit: str = "sgd"  # "exact": least-squares optimum of the population loss
    log_every: int = 1
    exact_grad: bool = False
    keep_iterates: bool = False

    def __post_init__(self):
        if self.T < 1 or self.N < 1:
            raise ValueError("T and N must be >= 1")
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if self.beta is not None and not self.beta > 0:
            raise ValueError("beta must be positive")
        if self.probe not in PROBES:
            raise ValueError(f"probe must be one of {PROBES}")
        if self.fit not in FITS:
            raise ValueError(f"fit must be one of {FITS}")
        if self.horizon is not None and self.horizon < 1:
            raise ValueError("horizon override must be >= 1")
        if self.log_every < 1:
            raise ValueError("log_every must be >= 1")

    def horizon_for(self, gamma: float) -> int:
        if self.horizon is not None:
            return int(self.horizon)
        return max(1, math.ceil(math.log(self.T + 1) / (1.0 - gamma)))

    # consumed by the shared run bookkeeping
    checkpoint_every = 0
    checkpoint_path = None


def _reward_at(utility, phi: FeatureMap, omega: np.ndarray, states, actions, t: int, run) -> np.ndarray:
    r = utility.grad_at(lambda s, a: phi.predict(omega, s, a), states, actions)
    bad = ~np.isfinite(r)
    if not utility.linear:
        bad |= r <= 0  # log barrier: fitted row sum at or below -sigma
    if np.any(bad):
        run.finish(None)
        raise NumericError(f"iteration {t}: utility gradient undefined at the fitted occupancy", run.log)
    return r


def run_linfa_pg(mdp: TabularMdp, params0: PolicyParams, utility, phi: FeatureMap, cfg: LinfaConfig):
    """Stochastic PG with a linearly approximated occupancy measure.

    Per iteration t: fit omega_t under pi_{theta_t}, sample N trajectories under
    pi_{theta_t}, and step theta += (alpha / N) sum_i g(tau_i, theta_t, r_{t-1})
    with r_{t-1} = grad F(<phi, omega_{t-1}>) queried only at visited pairs.
    The fit before the loop (under theta_0) supplies r_{-1}; the fit at t = T-1
    would only feed a step that never happens, so it is skipped and a run costs
    T (K H + N H) environment steps.

    The regression columns of row t describe omega_{t-1}, the fit behind that
    row's reward, against lambda_H of the policy it was fitted under.
    """
    if not params0.param.discrete:
        raise ValueError("LinFA policy gradient needs a softmax policy")
    if phi.table.shape[:2] != (mdp.num_states, mdp.num_actions):
        raise ValueError("feature table does not match the MDP's state-action space")
    if utility.linear is False and getattr(utility, "num_actions", None) is None:
        raise ValueError("the utility must know num_actions to be queried lazily")
    if np.min(mdp.initial_dist) <= 0:
        warnings.warn("initial distribution has zero-mass states; the regression never "
                      "samples them (rho_min > 0 is assumed by the analysis)", stacklevel=2)
    H = cfg.horizon_for(mdp.discount)
    disc = mdp.discounts(H)
    task = TabularTask(mdp, utility, cfg.exact_grad)
    task.bounded_weights = False
    run = _Run(cfg, task, "linfa_pg", H, extra_columns=LINFA_COLUMNS)
    run.log.meta.update(N=cfg.N, K=cfg.K, features=phi.name, probe=cfg.probe, fit=cfg.fit)
    beta = 1.0 / (8.0 * phi.bound**2) if cfg.beta is None else cfg.beta
    run.log.meta["beta"] = beta
    rng = make_rng(cfg.seed)

    def fit(params):
        if cfg.fit == "exact":
            return best_fit(mdp, params, phi, H), 0
        state = sgd_occupancy_fit(mdp, params, phi, cfg.K, beta, H, rng, cfg.probe)
        return state.average, state.steps

    params = params0
    _initial_record(run, params)
    # omega_prev was fitted under fit_params and supplies r_{t-1}
    omega_prev, steps = fit(params)
    fit_params = params
    k_logged = 0 if cfg.fit == "exact" else cfg.K
    for t in range(cfg.T):
        omega_t = None
        if t + 1 < cfg.T:
            # omega_t feeds r_t for the next step; the last iteration's fit would go unused
            omega_t, fit_steps = fit(params)
            steps += fit_steps
        states, actions = sample_batch(mdp, params, H, cfg.N, rng)
        steps += cfg.N * H
        r_at = _reward_at(utility, phi, omega_prev, states, actions, t, run)
        g = pg_from_paths(states, actions, params, r_at, disc) / cfg.N
        new = params.with_theta(params.theta + cfg.alpha * g)
        extra = {}
        if run.should_log(t):
            lam_h = exact_occupancy(mdp, fit_params, H).values
            fitted = phi.predict_all(omega_prev)
            extra = dict(
                K=k_logged,
                final_avg_loss=float(mdp.initial_dist @ ((lam_h - fitted) ** 2).mean(axis=1)),
                fit_residual_at_visited=float(np.max(np.abs(fitted - lam_h)[states, actions])),
            )
        run.record(t, steps, new, cfg.alpha, None, float(np.linalg.norm(g)), **extra)
        params, omega_prev, fit_params = new, omega_t, params
    run.log.meta["total_steps"] = steps
    return run.finish(params.theta)
