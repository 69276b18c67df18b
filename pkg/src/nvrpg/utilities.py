"""Utilities F(lambda) of the state-action occupancy measure."""

from __future__ import annotations

import math
from typing import Callable, Optional

import numpy as np


def _check_nonnegative(lam: np.ndarray) -> None:
    if np.any(lam < 0):
        raise ValueError("occupancy entries must be nonnegative")


def _as_table(lam) -> np.ndarray:
    return np.asarray(getattr(lam, "values", lam), dtype=np.float64)


class LinearUtility:
    """F(lambda) = <r, lambda>: the cumulative-reward objective."""

    kind = "linear"
    linear = True

    def __init__(self, reward: np.ndarray):
        r = np.array(reward, dtype=np.float64)
        if r.ndim != 2 or not np.all(np.isfinite(r)):
            raise ValueError("reward must be a finite (S, A) table")
        r.setflags(write=False)
        self.reward = r
        self.l_lambda = float(np.max(np.abs(r)))
        self.L_lambda = 0.0
        self.L_lambda_inf = 0.0

    def value(self, lam) -> float:
        lam = _as_table(lam)
        _check_nonnegative(lam)
        return float(np.sum(self.reward * lam))

    def grad(self, lam) -> np.ndarray:
        return self.reward

    def grad_at(self, lam_fn: Callable, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        return self.reward[states, actions]


class LogBarrierUtility:
    """F(lambda) = sum_s log(sum_a lambda[s, a] + sigma); concave, exploration-seeking.

    Constants over any occupancy set: ||grad||_inf <= 1/sigma; the gradient is
    1/sigma^2-Lipschitz from l1 to l_inf and sqrt(|A|)/sigma^2-Lipschitz from l2.
    """

    kind = "log_barrier"
    linear = False

    def __init__(self, sigma: float = 0.125, num_actions: Optional[int] = None):
        if not sigma > 0:
            raise ValueError(f"log_barrier utility needs sigma > 0, got {sigma}")
        self.sigma = float(sigma)
        self.num_actions = num_actions
        self.l_lambda = 1.0 / self.sigma
        self.L_lambda_inf = 1.0 / self.sigma**2
        self.L_lambda = None if num_actions is None else math.sqrt(num_actions) / self.sigma**2

    def value(self, lam) -> float:
        lam = _as_table(lam)
        _check_nonnegative(lam)
        return float(np.sum(np.log(lam.sum(axis=1) + self.sigma)))

    def grad(self, lam) -> np.ndarray:
        lam = _as_table(lam)
        row = 1.0 / (lam.sum(axis=1) + self.sigma)
        return np.repeat(row[:, None], lam.shape[1], axis=1)

    def grad_at(self, lam_fn: Callable, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        """Gradient entries at the given pairs only.

        ``lam_fn(s, a)`` evaluates the occupancy at index arrays; it is queried for
        every action of each distinct visited state and nothing else.
        """
        if self.num_actions is None:
            raise ValueError("grad_at needs the utility to know num_actions")
        num_actions = self.num_actions
        uniq, inverse = np.unique(states, return_inverse=True)
        ss = np.repeat(uniq, num_actions)
        aa = np.tile(np.arange(num_actions), uniq.size)
        row_sums = lam_fn(ss, aa).reshape(uniq.size, num_actions).sum(axis=1)
        return (1.0 / (row_sums + self.sigma))[inverse].reshape(states.shape)


def utility_value(u, lam) -> float:
    return u.value(lam)


def utility_grad(u, lam) -> np.ndarray:
    return u.grad(lam)


def make_utility(kind: str, *, reward=None, sigma: float = 0.125, num_actions=None):
    if kind == "linear":
        if reward is None:
            raise ValueError("linear utility needs a reward table")
        return LinearUtility(reward)
    if kind == "log_barrier":
        return LogBarrierUtility(sigma, num_actions)
    raise ValueError(f"unknown utility {kind!r}")
