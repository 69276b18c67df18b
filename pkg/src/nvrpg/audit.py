"""End-to-end invariant checks behind the ``audit`` command.

Every check recomputes its reference value independently (exact dynamic
programming, finite differences or direct summation) and reports the measured
statistic next to its tolerance.  Statistical checks use z-scores against the
sample standard error, so ``budget`` trades runtime for resolution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from nvrpg import algorithms as alg
from nvrpg import kernels, linfa
from nvrpg.estimators import (
    geometric_occupancy_at, is_weight, log_is_weights, occupancy_estimate, pg_estimate,
)
from nvrpg.gridworld import build_gridworld, chain_2state, frozen_lake_8x8
from nvrpg.mdp import Trajectory, exact_occupancy, make_rng, sample_batch
from nvrpg.policy import FeatureSoftmax, PolicyParams, TabularSoftmax, is_weight_bound, normalized_step
from nvrpg.utilities import LinearUtility, LogBarrierUtility

SCOPES = ("estimators", "policy", "algorithms", "linfa", "all")
DEFAULT_BUDGET = 20_000
Z_TOL = 4.0


@dataclass
class Check:
    scope: str
    name: str
    passed: bool
    statistic: float
    tolerance: float
    detail: str = ""

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        extra = f"  ({self.detail})" if self.detail else ""
        return f"{tag}  {self.scope}.{self.name}: statistic={self.statistic:.4g} tolerance={self.tolerance:.4g}{extra}"


@dataclass
class AuditReport:
    checks: list

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def render(self) -> str:
        lines = [c.line() for c in self.checks]
        failed = sum(not c.passed for c in self.checks)
        lines.append(f"{len(self.checks) - failed}/{len(self.checks)} checks passed")
        return "\n".join(lines)


def _le(scope, name, stat, tol, detail=""):
    return Check(scope, name, bool(stat <= tol), float(stat), float(tol), detail)


def _max_z(samples: np.ndarray, target: np.ndarray):
    """Largest |mean - target| / standard error over coordinates, plus the largest standard error."""
    samples = samples.reshape(samples.shape[0], -1)
    target = np.asarray(target, dtype=np.float64).ravel()
    mean = samples.mean(axis=0)
    se = samples.std(axis=0, ddof=1) / np.sqrt(samples.shape[0])
    diff = np.abs(mean - target)
    # a coordinate with zero spread must match exactly
    z = np.where(se > 0, diff / np.where(se > 0, se, 1.0), np.where(diff > 1e-12, np.inf, 0.0))
    return float(z.max()), float(se.max())


def _tabular(num_states, num_actions, rng, scale=1.0):
    param = TabularSoftmax(num_states, num_actions)
    return PolicyParams(scale * rng.standard_normal(param.dim), param)


# -- policy -------------------------------------------------------------------


def _policy_checks(budget: int) -> list:
    rng = make_rng(11)
    out = []
    worst = 0.0
    for _ in range(20):
        p = _tabular(6, 3, rng, 2.0)
        feat = PolicyParams(rng.standard_normal(4), FeatureSoftmax(rng.standard_normal((6, 3, 4))))
        for params in (p, feat):
            probs = params.probs()
            for s in range(6):
                mean = sum(probs[s, a] * params.score(s, a) for a in range(3))
                worst = max(worst, float(np.abs(mean).max()))
    out.append(_le("policy", "score_mean_zero", worst, 1e-12, "max |E_a[score(s, a)]|"))

    worst = 0.0
    eps = 1e-6
    for _ in range(50):
        params = PolicyParams(rng.standard_normal(4), FeatureSoftmax(rng.standard_normal((5, 3, 4))))
        s, a = int(rng.integers(5)), int(rng.integers(3))
        fd = np.empty(4)
        for i in range(4):
            e = np.zeros(4)
            e[i] = eps
            fd[i] = (params.with_theta(params.theta + e).log_probs()[s, a]
                     - params.with_theta(params.theta - e).log_probs()[s, a]) / (2 * eps)
        sc = params.score(s, a)
        worst = max(worst, float(np.linalg.norm(sc - fd) / max(np.linalg.norm(fd), 1e-8)))
    out.append(_le("policy", "score_finite_difference", worst, 1e-5, "relative error, 50 random points"))

    worst = 0.0
    for _ in range(200):
        theta = rng.standard_normal(10)
        alpha = float(rng.uniform(1e-4, 2.0))
        new = normalized_step(theta, rng.standard_normal(10) * 10 ** rng.uniform(-6, 6), alpha)
        worst = max(worst, abs(float(np.linalg.norm(new - theta)) - alpha))
    out.append(_le("policy", "normalized_step_length", worst, 1e-12, "| ||step|| - alpha |"))
    theta = rng.standard_normal(5)
    moved = float(np.abs(normalized_step(theta, np.zeros(5), 0.3) - theta).max())
    out.append(_le("policy", "zero_direction_rule", moved, 0.0))

    mdp = build_gridworld(frozen_lake_8x8())
    H, alpha = 40, 0.05
    worst = -np.inf
    n = max(budget // 100, 10)
    for _ in range(20):
        old = _tabular(mdp.num_states, 4, rng)
        direction = rng.standard_normal(old.theta.size)
        new = old.with_theta(normalized_step(old.theta, direction, alpha))
        states, actions = sample_batch(mdp, new, H, n, rng)
        log_w = log_is_weights(states, actions, old, new)
        worst = max(worst, float(log_w.max()) - float(np.log(is_weight_bound(1.0, H, alpha))))
    out.append(_le("policy", "is_weight_bound", worst, 0.0, "max log w - log bound"))
    return out


# -- estimators ---------------------------------------------------------------


def truncated_return(mdp, params, reward, H) -> float:
    return float(np.sum(exact_occupancy(mdp, params, H).values * reward))


def _fd_gradient(mdp, params, reward, H, eps=1e-6):
    g = np.empty(params.theta.size)
    for i in range(g.size):
        e = np.zeros(g.size)
        e[i] = eps
        g[i] = (truncated_return(mdp, params.with_theta(params.theta + e), reward, H)
                - truncated_return(mdp, params.with_theta(params.theta - e), reward, H)) / (2 * eps)
    return g


def _estimator_checks(budget: int) -> list:
    rng = make_rng(22)
    mdp = chain_2state()
    H = 12
    params = _tabular(2, 2, rng)
    reward = np.array([[1.0, -0.5], [0.25, 2.0]])
    states, actions = sample_batch(mdp, params, H, budget, rng)
    paths = [Trajectory(states[i], actions[i], 2, 2) for i in range(budget)]
    out = []

    lams = np.array([occupancy_estimate(tau, mdp.discount).values for tau in paths])
    z, se = _max_z(lams, exact_occupancy(mdp, params, H).values)
    out.append(_le("estimators", "occupancy_estimate_unbiased", z, Z_TOL, f"max z over entries, sigma={se:.3g}"))

    grads = np.array([pg_estimate(tau, params, reward, mdp.discount) for tau in paths])
    z, se = _max_z(grads, _fd_gradient(mdp, params, reward, H))
    out.append(_le("estimators", "pg_estimate_unbiased", z, Z_TOL, f"vs finite-difference gradient, sigma={se:.3g}"))

    other = params.with_theta(params.theta + 0.3 * rng.standard_normal(4))
    w = np.array([is_weight(tau, other, params) for tau in paths])
    z, se = _max_z(w[:, None], np.ones(1))
    out.append(_le("estimators", "is_weight_mean_one", z, Z_TOL, f"sigma={se:.3g}"))

    lam = exact_occupancy(mdp, params).values
    zs, ses = [], []
    for s in range(2):
        for a in range(2):
            hits = np.array([geometric_occupancy_at(mdp, params, (s, a), rng) for _ in range(budget // 4)])
            z, se = _max_z(hits[:, None], [(1 - mdp.discount) * lam[s, a]])
            zs.append(z)
            ses.append(se)
    out.append(_le("estimators", "geometric_probe_mean", max(zs), Z_TOL, f"mean (1-gamma) lambda, sigma={max(ses):.3g}"))
    return out


# -- algorithms ---------------------------------------------------------------


def _algorithm_checks(budget: int) -> list:
    out = []
    spec = frozen_lake_8x8()
    mdp = build_gridworld(spec)
    param = TabularSoftmax(mdp.num_states, 4)
    p0 = PolicyParams(np.zeros(param.dim), param)
    reward = np.zeros((mdp.num_states, 4))
    reward[spec.index((7, 7))] = 1.0
    reward[spec.index((0, 7))] = 0.5
    cfg = alg.NvrpgConfig(T=200, alpha0=1.0, seed=3, keep_iterates=True)
    a = alg.run_nvrpg_general(mdp, p0, LinearUtility(reward), cfg)
    b = alg.run_nvrpg_standard(mdp, p0, reward, cfg)
    diff = max(float(np.abs(x - y).max()) for x, y in zip(a.iterates, b.iterates))
    out.append(_le("algorithms", "linear_utility_reduction", diff, 1e-12, "T=200, max coordinate gap"))

    T = max(min(budget // 10, 3000), 100)
    cfg = alg.NvrpgConfig(T=T, alpha0=3.0, seed=5, log_every=T)
    log = alg.run_nvrpg_general(mdp, p0, LogBarrierUtility(0.125, 4), cfg)
    out.append(_le("algorithms", "is_weight_bound_run", log.meta["max_log_weight_minus_log_bound"], 0.0,
                   f"8x8 lake, T={T}, max log w - log bound"))
    out.append(_le("algorithms", "normalized_step_exact", log.meta["max_step_error"], 1e-12))
    expected = T * log.meta["horizon"]
    out.append(_le("algorithms", "sample_accounting", abs(log.meta["total_steps"] - expected), 0.0,
                   f"{log.meta['total_steps']} steps vs T*H = {expected}"))

    chain = chain_2state()
    c0 = PolicyParams(np.zeros(4), TabularSoftmax(2, 2))
    # the log barrier is nearly flat on this MDP (gradient at the noise floor from
    # theta_0); a linear reward keeps the stationarity measure above the noise
    util = LinearUtility(np.array([[1.0, 0.0], [0.0, 2.0]]))
    means = []
    for t_len in (200, 1600):
        seeds = []
        for seed in range(3):
            log = alg.run_nvrpg_general(chain, c0, util, alg.NvrpgConfig(T=t_len, alpha0=1.0, seed=seed, exact_grad=True))
            seeds.append(np.mean(log.column("grad_norm_exact")))
        means.append(float(np.mean(seeds)))
    out.append(_le("algorithms", "gradient_norm_trend", means[1] - means[0], 0.0,
                   f"mean exact grad norm T=200: {means[0]:.4g}, T=1600: {means[1]:.4g}"))
    return out


# -- linfa --------------------------------------------------------------------


def _linfa_checks(budget: int) -> list:
    rng = make_rng(31)
    out = []
    mdp = chain_2state()
    H = 10
    params = _tabular(2, 2, rng)
    phi = linfa.one_hot(2, 2, mdp.initial_dist)
    omega = rng.standard_normal(phi.dim)
    lam_h = exact_occupancy(mdp, params, H).values
    resid = phi.predict_all(omega) - lam_h
    weights = mdp.initial_dist[:, None] / 2 * np.ones((2, 2))
    exact = 2.0 * np.einsum("sa,sa,sam->m", weights, resid, phi.table)
    s, a = linfa.sample_regression_pairs(mdp, budget, rng)
    states, actions = sample_batch(mdp, params, H, budget, rng)
    targets = kernels.pair_probe(states, actions, s, a, mdp.discounts(H))
    grads = np.array([linfa.stochastic_reg_grad(omega, (s[k], a[k]), targets[k], phi) for k in range(budget)])
    z, se = _max_z(grads, exact)
    out.append(_le("linfa", "regression_gradient_unbiased", z, Z_TOL, f"sigma={se:.3g}"))

    loss = linfa.regression_loss(mdp, params, linfa.best_fit(mdp, params, phi, H), phi, H)
    out.append(_le("linfa", "one_hot_zero_approximation_error", loss, 1e-18))

    feats = rng.standard_normal((500, 6))
    targets = rng.standard_normal(500)
    avg, _ = kernels.averaged_sgd(feats, targets, 0.05, np.zeros(6))
    omega, total = np.zeros(6), np.zeros(6)
    for k in range(500):
        omega = omega - 0.05 * 2.0 * (feats[k] @ omega - targets[k]) * feats[k]
        total += omega
    out.append(_le("linfa", "average_is_iterate_mean", float(np.abs(avg - total / 500).max()), 1e-12))

    cfg = linfa.LinfaConfig(T=3, N=4, alpha=0.1, K=50, horizon=H, seed=2)
    log = linfa.run_linfa_pg(mdp, PolicyParams(np.zeros(4), TabularSoftmax(2, 2)), LogBarrierUtility(0.125, 2), phi, cfg)
    expected = cfg.T * (cfg.K * H + cfg.N * H)
    out.append(_le("linfa", "sample_accounting", abs(log.meta["total_steps"] - expected), 0.0,
                   f"{log.meta['total_steps']} steps vs T (K H + N H) = {expected}"))
    return out


_SUITES = {
    "policy": _policy_checks,
    "estimators": _estimator_checks,
    "algorithms": _algorithm_checks,
    "linfa": _linfa_checks,
}


def audit_invariants(scope: str = "all", budget: int = DEFAULT_BUDGET) -> AuditReport:
    if scope not in SCOPES:
        raise ValueError(f"scope must be one of {SCOPES}, got {scope!r}")
    if budget < 10:
        raise ValueError("budget must be at least 10 samples")
    names = list(_SUITES) if scope == "all" else [scope]
    checks = []
    for name in names:
        checks.extend(_SUITES[name](int(budget)))
    return AuditReport(checks)
