"""Softmax and Gaussian policy parametrizations, score functions, normalized step."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Optional

import numpy as np

from nvrpg.errors import NumericError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PolicyConstants:
    """Uniform bounds on the feature gradient (l_psi) and Hessian (L_psi)."""

    l_psi: float
    L_psi: float


class TabularSoftmax:
    """psi(s, a; theta) = theta[s, a]; d = |S| |A|."""

    discrete = True

    def __init__(self, num_states: int, num_actions: int):
        self.num_states = int(num_states)
        self.num_actions = int(num_actions)
        self.dim = self.num_states * self.num_actions
        self.constants = PolicyConstants(1.0, 0.0)

    def logits(self, theta: np.ndarray) -> np.ndarray:
        return theta.reshape(self.num_states, self.num_actions)

    def features(self, s: int, a: int) -> np.ndarray:
        e = np.zeros(self.dim)
        e[s * self.num_actions + a] = 1.0
        return e

    def contract(self, probs: np.ndarray, weights: np.ndarray) -> np.ndarray:
        return (weights - probs * weights.sum(axis=1, keepdims=True)).ravel()


class FeatureSoftmax:
    """psi(s, a; theta) = <features[s, a], theta> with a fixed (S, A, d) feature table."""

    discrete = True

    def __init__(self, features: np.ndarray):
        f = np.array(features, dtype=np.float64)
        if f.ndim != 3:
            raise ValueError("features must have shape (S, A, d)")
        f.setflags(write=False)
        self.table = f
        self.num_states, self.num_actions, self.dim = f.shape
        # linear in theta: the Hessian of psi vanishes
        self.constants = PolicyConstants(float(np.linalg.norm(f, axis=2).max()), 0.0)

    def logits(self, theta: np.ndarray) -> np.ndarray:
        return self.table @ theta

    def features(self, s: int, a: int) -> np.ndarray:
        return self.table[s, a]

    def contract(self, probs: np.ndarray, weights: np.ndarray) -> np.ndarray:
        mean_feat = np.einsum("sa,sad->sd", probs, self.table)
        return np.einsum("sa,sad->d", weights, self.table) - weights.sum(axis=1) @ mean_feat


class GaussianPolicy:
    """a ~ N(<phi(s), theta>, sigma^2) for scalar continuous states and actions."""

    discrete = False
    constants = None

    def __init__(self, feature_map: Callable[[np.ndarray], np.ndarray], dim: int, sigma: float):
        if not sigma > 0:
            raise ValueError(f"gaussian policy needs sigma > 0, got {sigma}")
        self.feature_map = feature_map
        self.dim = int(dim)
        self.sigma = float(sigma)

    def mean(self, theta, s):
        return self.feature_map(s) @ theta

    def log_density(self, theta, s, a):
        z = (np.asarray(a) - self.mean(theta, s)) / self.sigma
        return -0.5 * z**2 - np.log(self.sigma * np.sqrt(2.0 * np.pi))

    def score(self, theta, s, a):
        """grad_theta log pi(a | s); accepts scalar or vector s, a."""
        resid = (np.asarray(a) - self.mean(theta, s)) / self.sigma**2
        return np.asarray(resid)[..., None] * self.feature_map(s)


@dataclass(frozen=True, eq=False)
class PolicyParams:
    """A parameter vector bound to its parametrization.  Immutable."""

    theta: np.ndarray
    param: object

    def __post_init__(self):
        theta = np.array(self.theta, dtype=np.float64).ravel()
        if theta.size != self.param.dim:
            raise ValueError(f"theta has dimension {theta.size}, parametrization expects {self.param.dim}")
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)

    def with_theta(self, theta) -> "PolicyParams":
        return PolicyParams(theta, self.param)

    def _require_discrete(self):
        if not self.param.discrete:
            raise ValueError("discrete-action query on a gaussian policy")

    @cached_property
    def _log_probs(self) -> np.ndarray:
        self._require_discrete()
        z = self.param.logits(self.theta)
        z = z - z.max(axis=1, keepdims=True)
        out = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        out.setflags(write=False)
        return out

    @cached_property
    def _probs(self) -> np.ndarray:
        out = np.exp(self._log_probs)
        out.setflags(write=False)
        return out

    def log_probs(self) -> np.ndarray:
        return self._log_probs

    def probs(self) -> np.ndarray:
        return self._probs

    def action_distribution(self, s: int) -> np.ndarray:
        return self._probs[s]

    def score(self, s: int, a: int) -> np.ndarray:
        """grad_theta log pi(a|s) = grad psi(s,a) - sum_a' pi(a'|s) grad psi(s,a')."""
        if not self.param.discrete:
            raise ValueError("use gaussian_score for gaussian policies")
        weights = np.zeros_like(self._probs)
        weights[s, a] = 1.0
        return self.param.contract(self._probs, weights)

    def contract(self, weights: np.ndarray) -> np.ndarray:
        """sum_{s,a} weights[s, a] * score(s, a), without materializing scores."""
        return self.param.contract(self._probs, weights)

    @property
    def constants(self) -> Optional[PolicyConstants]:
        return self.param.constants


def action_distribution(params: PolicyParams, s: int) -> np.ndarray:
    return params.action_distribution(s)


def score(params: PolicyParams, s: int, a: int) -> np.ndarray:
    return params.score(s, a)


def gaussian_sample(params: PolicyParams, s, rng: np.random.Generator):
    pol = params.param
    mean = pol.mean(params.theta, s)
    return mean + pol.sigma * rng.standard_normal(np.shape(mean))


def gaussian_score(params: PolicyParams, s, a) -> np.ndarray:
    return params.param.score(params.theta, s, a)


def normalized_step(theta: np.ndarray, direction: np.ndarray, alpha: float) -> np.ndarray:
    """theta + alpha * direction / ||direction||; theta unchanged for a zero direction."""
    if not alpha > 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    direction = np.asarray(direction, dtype=np.float64)
    if not np.all(np.isfinite(direction)):
        raise NumericError("non-finite entry in update direction")
    norm = np.linalg.norm(direction)
    if norm == 0.0:
        log.debug("zero update direction; parameters left unchanged")
        return np.array(theta, dtype=np.float64)
    return theta + (alpha / norm) * direction


def is_weight_bound(constants, horizon: int, alpha: float) -> float:
    """exp(2 H l_psi alpha): ceiling on the IS weight between consecutive normalized iterates."""
    l_psi = constants.l_psi if isinstance(constants, PolicyConstants) else float(constants)
    if l_psi < 0 or horizon < 0 or alpha < 0:
        raise ValueError("is_weight_bound inputs must be nonnegative")
    return float(np.exp(2.0 * horizon * l_psi * alpha))
