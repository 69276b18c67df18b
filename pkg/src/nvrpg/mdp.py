"""Finite discounted MDPs: representation, simulation and exact DP oracles."""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Optional

import numpy as np

from nvrpg import kernels

EXACT_INFINITE = "exact_infinite"
EXACT_TRUNCATED = "exact_truncated"
SAMPLED = "sampled"
ESTIMATE = "estimate"


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based Philox generator from an explicit 64-bit seed."""
    if not 0 <= int(seed) < 2**64:
        raise ValueError(f"seed must fit in 64 unsigned bits, got {seed}")
    return np.random.Generator(np.random.Philox(int(seed)))


@dataclass(frozen=True, eq=False)
class TabularMdp:
    """Dense finite MDP.  ``transition[s, a, s']`` is P(s' | s, a)."""

    transition: np.ndarray
    initial_dist: np.ndarray
    discount: float
    name: str = "mdp"

    def __post_init__(self):
        p = np.array(self.transition, dtype=np.float64)
        rho = np.array(self.initial_dist, dtype=np.float64)
        if p.ndim != 3 or p.shape[0] != p.shape[2] or p.shape[0] < 1 or p.shape[1] < 1:
            raise ValueError(f"transition must have shape (S, A, S), got {p.shape}")
        if rho.shape != (p.shape[0],):
            raise ValueError(f"initial_dist must have shape ({p.shape[0]},), got {rho.shape}")
        if not np.all(np.isfinite(p)) or np.any(p < 0):
            raise ValueError("transition probabilities must be finite and nonnegative")
        bad = np.abs(p.sum(axis=2) - 1.0) > 1e-12
        if np.any(bad):
            s, a = np.argwhere(bad)[0]
            raise ValueError(f"transition row (s={s}, a={a}) sums to {p[s, a].sum()!r}, not 1")
        if not np.all(np.isfinite(rho)) or np.any(rho < 0) or abs(rho.sum() - 1.0) > 1e-12:
            raise ValueError("initial_dist must be a probability vector")
        if not 0.0 < float(self.discount) < 1.0:
            raise ValueError(f"discount must lie in (0, 1), got {self.discount}")
        p.setflags(write=False)
        rho.setflags(write=False)
        object.__setattr__(self, "transition", p)
        object.__setattr__(self, "initial_dist", rho)
        object.__setattr__(self, "discount", float(self.discount))

    @property
    def num_states(self) -> int:
        return self.transition.shape[0]

    @property
    def num_actions(self) -> int:
        return self.transition.shape[1]

    @cached_property
    def cum_transition(self) -> np.ndarray:
        return kernels.cumulative_table(self.transition)

    @cached_property
    def cum_initial(self) -> np.ndarray:
        return kernels.cumulative_table(self.initial_dist)

    def discounts(self, horizon: int) -> np.ndarray:
        return self.discount ** np.arange(horizon, dtype=np.float64)


@dataclass(frozen=True, eq=False)
class Trajectory:
    """H consecutive (state, action) pairs, s_0 first."""

    states: np.ndarray
    actions: np.ndarray
    num_states: int
    num_actions: int

    def __post_init__(self):
        s = np.asarray(self.states, dtype=np.int64)
        a = np.asarray(self.actions, dtype=np.int64)
        if s.ndim != 1 or s.shape != a.shape or s.size < 1:
            raise ValueError("states and actions must be equal-length 1-d sequences, H >= 1")
        if s.min() < 0 or s.max() >= self.num_states or a.min() < 0 or a.max() >= self.num_actions:
            raise ValueError("trajectory index out of range")
        object.__setattr__(self, "states", s)
        object.__setattr__(self, "actions", a)

    @property
    def horizon(self) -> int:
        return self.states.size

    @property
    def steps(self) -> list[tuple[int, int]]:
        return list(zip(self.states.tolist(), self.actions.tolist()))

    def __len__(self):
        return self.horizon


@dataclass(frozen=True, eq=False)
class OccupancyVector:
    values: np.ndarray  # (S, A)
    kind: str
    horizon: Optional[int] = None

    def __getitem__(self, pair):
        return self.values[pair]

    @property
    def total(self) -> float:
        return float(self.values.sum())

    def check(self, discount: float, tol: float = 1e-9) -> None:
        """Assert the sign and mass invariants implied by ``kind``."""
        if np.any(self.values < 0):
            raise AssertionError("occupancy has negative entries")
        if self.kind == EXACT_INFINITE:
            expected = 1.0 / (1.0 - discount)
        elif self.kind in (EXACT_TRUNCATED, SAMPLED):
            expected = (1.0 - discount**self.horizon) / (1.0 - discount)
        else:
            return
        if abs(self.total - expected) > tol:
            raise AssertionError(f"occupancy mass {self.total} != {expected}")


def policy_probs(policy) -> np.ndarray:
    """Accept anything with a ``probs()`` method, or a raw (S, A) table."""
    if hasattr(policy, "probs"):
        return policy.probs()
    return np.asarray(policy, dtype=np.float64)


def draw_uniforms(rng: np.random.Generator, n: int, horizon: int) -> np.ndarray:
    return rng.random((n, horizon, 2))


def sample_batch(mdp: TabularMdp, policy, horizon: int, n: int, rng: np.random.Generator):
    """Sample ``n`` independent trajectories; returns (states, actions), each (n, H)."""
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    if n < 1:
        raise ValueError("need at least one trajectory")
    probs = policy_probs(policy)
    u = draw_uniforms(rng, n, horizon)
    return kernels.sample_paths(
        mdp.cum_initial, kernels.cumulative_table(probs), mdp.cum_transition, u
    )


def sample_trajectory(mdp: TabularMdp, policy, horizon: int, rng: np.random.Generator) -> Trajectory:
    states, actions = sample_batch(mdp, policy, horizon, 1, rng)
    return Trajectory(states[0], actions[0], mdp.num_states, mdp.num_actions)


def policy_transition(mdp: TabularMdp, probs: np.ndarray) -> np.ndarray:
    """State-to-state kernel P_pi[s, s'] = sum_a pi(a|s) P(s'|s, a)."""
    return np.einsum("sa,sat->st", probs, mdp.transition)


def state_occupancy(mdp: TabularMdp, probs: np.ndarray) -> np.ndarray:
    """Discounted state visitation d = (I - gamma P_pi^T)^{-1} rho."""
    p_pi = policy_transition(mdp, probs)
    lhs = np.eye(mdp.num_states) - mdp.discount * p_pi.T
    # the solve can leave -1e-17 style noise on unreachable states
    return np.maximum(np.linalg.solve(lhs, mdp.initial_dist), 0.0)


def exact_occupancy(mdp: TabularMdp, policy, horizon: Optional[int] = None) -> OccupancyVector:
    """Exact state-action occupancy; infinite horizon when ``horizon`` is None."""
    probs = policy_probs(policy)
    if horizon is None:
        d = state_occupancy(mdp, probs)
        return OccupancyVector(d[:, None] * probs, EXACT_INFINITE)
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    p_pi = policy_transition(mdp, probs)
    dist = mdp.initial_dist.copy()
    lam = np.zeros((mdp.num_states, mdp.num_actions))
    weight = 1.0
    for t in range(horizon):
        lam += weight * dist[:, None] * probs
        if t + 1 < horizon:
            dist = dist @ p_pi
            weight *= mdp.discount
    return OccupancyVector(lam, EXACT_TRUNCATED, horizon)


def exact_return(mdp: TabularMdp, policy, reward: np.ndarray) -> float:
    reward = np.asarray(reward, dtype=np.float64)
    if reward.size != mdp.num_states * mdp.num_actions:
        raise ValueError(f"reward has {reward.size} entries, expected {mdp.num_states * mdp.num_actions}")
    lam = exact_occupancy(mdp, policy).values
    return float(np.sum(lam * reward.reshape(lam.shape)))


def q_values(mdp: TabularMdp, probs: np.ndarray, reward: np.ndarray) -> np.ndarray:
    """Action values Q^pi_r for an (S, A) reward table."""
    p_pi = policy_transition(mdp, probs)
    r_pi = np.sum(probs * reward, axis=1)
    v = np.linalg.solve(np.eye(mdp.num_states) - mdp.discount * p_pi, r_pi)
    return reward + mdp.discount * mdp.transition @ v


def value_iteration(mdp: TabularMdp, reward: np.ndarray, tol: float = 1e-10, max_iter: int = 1_000_000):
    """Optimal state values within ``tol`` (sup norm) and J* = <rho, V*>."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    reward = np.asarray(reward, dtype=np.float64).reshape(mdp.num_states, mdp.num_actions)
    gamma = mdp.discount
    v = np.zeros(mdp.num_states)
    # ||V_{k+1} - V*|| <= gamma / (1 - gamma) * ||V_{k+1} - V_k||
    stop = tol * (1.0 - gamma) / gamma
    for _ in range(max_iter):
        v_new = np.max(reward + gamma * mdp.transition @ v, axis=1)
        delta = np.max(np.abs(v_new - v))
        v = v_new
        if delta <= stop:
            break
    else:
        raise RuntimeError("value iteration did not converge")
    return v, float(mdp.initial_dist @ v)


# -- MDP definition files -----------------------------------------------------


def mdp_from_dict(doc: dict, name: str = "mdp") -> TabularMdp:
    try:
        n_s = int(doc["num_states"])
        n_a = int(doc["num_actions"])
        gamma = float(doc["gamma"])
        rho = np.asarray(doc["rho"], dtype=np.float64)
        records = doc["transitions"]
    except KeyError as exc:
        raise ValueError(f"MDP file is missing field {exc.args[0]!r}") from None
    p = np.zeros((n_s, n_a, n_s))
    for rec in records:
        s, a, s_next, prob = int(rec["s"]), int(rec["a"]), int(rec["s_next"]), float(rec["p"])
        if not (0 <= s < n_s and 0 <= a < n_a and 0 <= s_next < n_s):
            raise ValueError(f"transition record out of range: {rec}")
        p[s, a, s_next] += prob
    return TabularMdp(p, rho, gamma, name=name)


def load_mdp(path) -> TabularMdp:
    path = Path(path)
    return mdp_from_dict(json.loads(path.read_text()), name=path.stem)


def mdp_to_dict(mdp: TabularMdp) -> dict:
    s, a, t = np.nonzero(mdp.transition)
    return {
        "num_states": mdp.num_states,
        "num_actions": mdp.num_actions,
        "gamma": mdp.discount,
        "rho": mdp.initial_dist.tolist(),
        "transitions": [
            {"s": int(i), "a": int(j), "s_next": int(k), "p": float(mdp.transition[i, j, k])}
            for i, j, k in zip(s, a, t)
        ],
    }
