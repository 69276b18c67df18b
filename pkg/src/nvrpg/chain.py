"""A 1-D continuous chain for the Gaussian-policy pathway (cumulative reward only).

Dynamics are s' = s + a with s_0 ~ N(start_mean, start_std^2) and reward
r(s, a) = -s^2 - action_cost * a^2.  The policy mean is k*s + b, i.e. features
(s, 1).  Exact returns come from propagating the state density on a fine grid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from nvrpg.policy import GaussianPolicy, PolicyParams


def linear_features(s):
    s = np.asarray(s, dtype=np.float64)
    return np.stack([s, np.ones_like(s)], axis=-1)


@dataclass(frozen=True)
class ContinuousChain:
    discount: float = 0.9
    start_mean: float = 2.0
    start_std: float = 0.5
    action_cost: float = 0.1
    name: str = "continuous_chain_1d"

    def policy(self, sigma: float = 0.5) -> GaussianPolicy:
        return GaussianPolicy(linear_features, 2, sigma)

    def reward(self, s, a):
        return -(s**2) - self.action_cost * a**2

    def sample(self, params: PolicyParams, horizon: int, n: int, rng: np.random.Generator):
        pol = params.param
        s = self.start_mean + self.start_std * rng.standard_normal(n)
        noise = rng.standard_normal((n, horizon))
        states = np.empty((n, horizon))
        actions = np.empty((n, horizon))
        for h in range(horizon):
            a = pol.mean(params.theta, s) + pol.sigma * noise[:, h]
            states[:, h] = s
            actions[:, h] = a
            s = s + a
        return states, actions

    def discounts(self, horizon: int) -> np.ndarray:
        return self.discount ** np.arange(horizon, dtype=np.float64)

    def exact_return(self, params: PolicyParams, horizon: int = 200, half_width: float = 10.0,
                     num_points: int = 1001) -> float:
        """Discounted H-step return by density propagation on a uniform grid.

        Mass drifting past the grid edge is dropped, so keep ``half_width`` well
        beyond the reachable states of the policies being compared.
        """
        pol = params.param
        grid = np.linspace(-half_width, half_width, num_points)
        ds = grid[1] - grid[0]
        mu = pol.mean(params.theta, grid)
        var = pol.sigma**2
        # kernel[i, j] = density of s' = grid[j] given s = grid[i], times the cell width
        z = (grid[None, :] - (grid + mu)[:, None]) / pol.sigma
        kernel = np.exp(-0.5 * z**2) / (pol.sigma * np.sqrt(2.0 * np.pi)) * ds
        zs = (grid - self.start_mean) / self.start_std
        mass = np.exp(-0.5 * zs**2) / (self.start_std * np.sqrt(2.0 * np.pi)) * ds
        step_reward = -(grid**2) - self.action_cost * (mu**2 + var)
        total, weight = 0.0, 1.0
        for _ in range(horizon):
            total += weight * float(mass @ step_reward)
            mass = mass @ kernel
            weight *= self.discount
        return total


class ChainTask:
    """Adapter giving the chain the sampling/gradient interface of the tabular task."""

    bounded_weights = False

    def __init__(self, chain: ContinuousChain, eval_horizon: int = 200):
        self.chain = chain
        self.discount = chain.discount
        self.eval_horizon = eval_horizon

    def sample(self, params, horizon, rng):
        return self.chain.sample(params, horizon, 1, rng)

    def policy_gradient(self, paths, params, discounts):
        states, actions = paths
        rew = self.chain.reward(states, actions) * discounts
        togo = np.cumsum(rew[:, ::-1], axis=1)[:, ::-1]
        scores = params.param.score(params.theta, states, actions)
        return np.einsum("nh,nhd->d", togo, scores)

    def log_weights(self, paths, new, old):
        states, actions = paths
        pol = new.param
        diff = pol.log_density(new.theta, states, actions) - pol.log_density(old.theta, states, actions)
        return diff.sum(axis=-1)

    def evaluate(self, params):
        j = self.chain.exact_return(params, self.eval_horizon)
        return j, j, None
