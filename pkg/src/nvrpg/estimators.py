"""Sampled quantities: occupancy estimates, REINFORCE gradients, IS weights, probes."""

from __future__ import annotations

import numpy as np

from nvrpg import kernels
from nvrpg.errors import NumericError
from nvrpg.mdp import SAMPLED, OccupancyVector, TabularMdp, Trajectory, sample_batch
from nvrpg.policy import PolicyParams


def _paths(tau: Trajectory):
    return tau.states[None, :], tau.actions[None, :]


def occupancy_estimate(tau: Trajectory, gamma: float) -> OccupancyVector:
    """lambda(tau) = sum_h gamma^h e_{s_h, a_h}."""
    states, actions = _paths(tau)
    disc = gamma ** np.arange(tau.horizon, dtype=np.float64)
    lam = kernels.discounted_counts(states, actions, disc, tau.num_states, tau.num_actions)
    return OccupancyVector(lam, SAMPLED, tau.horizon)


def pg_from_paths(states, actions, params: PolicyParams, step_rewards, discounts) -> np.ndarray:
    """Truncated REINFORCE estimate summed over a batch of paths.

    ``step_rewards[i, h]`` is r(s_h, a_h) along path i; looking rewards up per step
    lets callers supply rewards that are only known at visited pairs.
    """
    pr = params.probs()
    w = kernels.rtg_weights(states, actions, step_rewards, discounts, pr.shape[0], pr.shape[1])
    return params.contract(w)


def pg_estimate(tau: Trajectory, params: PolicyParams, reward: np.ndarray, gamma: float) -> np.ndarray:
    """g(tau, theta, r) = sum_t (sum_{h>=t} gamma^h r(s_h, a_h)) grad log pi(a_t | s_t)."""
    reward = np.asarray(reward, dtype=np.float64)
    if reward.size != tau.num_states * tau.num_actions:
        raise ValueError(f"reward has {reward.size} entries, expected {tau.num_states * tau.num_actions}")
    reward = reward.reshape(tau.num_states, tau.num_actions)
    states, actions = _paths(tau)
    disc = gamma ** np.arange(tau.horizon, dtype=np.float64)
    return pg_from_paths(states, actions, params, reward[states, actions], disc)


def log_is_weights(states, actions, params_new: PolicyParams, params_old: PolicyParams) -> np.ndarray:
    """Per-path sum_h log pi_new(a_h|s_h) - log pi_old(a_h|s_h)."""
    diff = params_new.log_probs() - params_old.log_probs()
    out = diff[states, actions].sum(axis=-1)
    if not np.all(np.isfinite(out)):
        raise NumericError("non-finite log importance ratio")
    return out


def is_weight(tau: Trajectory, params_new: PolicyParams, params_old: PolicyParams) -> float:
    """w(tau | theta_new, theta_old) = prod_h pi_new(a_h|s_h) / pi_old(a_h|s_h)."""
    if params_new.theta.shape != params_old.theta.shape:
        raise ValueError("parameter shapes differ")
    return float(np.exp(log_is_weights(tau.states, tau.actions, params_new, params_old)))


def mc_truncated_occupancy_at(
    mdp: TabularMdp, policy, pair, horizon: int, rng: np.random.Generator, batch_size: int = 1
) -> float:
    """Unbiased estimate of lambda_H(s, a): discounted visits of ``pair`` on rollouts from rho."""
    s, a = pair
    states, actions = sample_batch(mdp, policy, horizon, batch_size, rng)
    ps = np.full(batch_size, s, dtype=np.int64)
    pa = np.full(batch_size, a, dtype=np.int64)
    return float(kernels.pair_probe(states, actions, ps, pa, mdp.discounts(horizon)).mean())


def geometric_rollout_hits(mdp: TabularMdp, policy, pair_s, pair_a, rng: np.random.Generator):
    """For each requested pair, draw H ~ Geom(1-gamma) on {0, 1, ...}, roll out H
    transitions from rho and report 1{(s_H, a_H) = pair}.  Returns (hits, steps used)."""
    pair_s = np.asarray(pair_s, dtype=np.int64)
    pair_a = np.asarray(pair_a, dtype=np.int64)
    lengths = rng.geometric(1.0 - mdp.discount, size=pair_s.size) - 1
    states, actions = sample_batch(mdp, policy, int(lengths.max()) + 1, pair_s.size, rng)
    rows = np.arange(pair_s.size)
    hits = (states[rows, lengths] == pair_s) & (actions[rows, lengths] == pair_a)
    return hits.astype(np.float64), int(np.sum(lengths + 1))


def geometric_occupancy_at(mdp: TabularMdp, policy, pair, rng: np.random.Generator, batch_size: int = 1) -> float:
    """Estimate with mean (1 - gamma) * lambda(s, a); averaged over ``batch_size`` rollouts."""
    s, a = pair
    hits, _ = geometric_rollout_hits(
        mdp, policy, np.full(batch_size, s), np.full(batch_size, a), rng
    )
    return float(hits.mean())

