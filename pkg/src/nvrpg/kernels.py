"""Hot inner loops, each in two flavours.

``*_nb`` functions are explicit loops compiled with numba (plain Python when
numba is missing).  ``*_np`` functions are vectorized numpy.  The public names
dispatch on :func:`nvrpg._backend.get_backend`.

All randomness enters as pre-drawn uniforms, so both flavours consume the
generator identically and the sampling kernels return the same integers.
"""

import numpy as np

from nvrpg._backend import get_backend, njit


def cumulative_table(probs: np.ndarray) -> np.ndarray:
    """Row-wise CDF along the last axis, renormalized so the last entry is 1.0."""
    cum = np.cumsum(probs, axis=-1)
    return cum / cum[..., -1:]


# -- inverse-CDF path sampling ------------------------------------------------


@njit
def _draw(cum, u):
    k = 0
    n = cum.shape[0]
    while k < n - 1 and cum[k] <= u:
        k += 1
    return k


@njit
def _sample_paths_nb(cum_rho, cum_pi, cum_p, u):
    n, horizon = u.shape[0], u.shape[1]
    states = np.empty((n, horizon), dtype=np.int64)
    actions = np.empty((n, horizon), dtype=np.int64)
    for i in range(n):
        s = _draw(cum_rho, u[i, 0, 0])
        for h in range(horizon):
            a = _draw(cum_pi[s], u[i, h, 1])
            states[i, h] = s
            actions[i, h] = a
            if h + 1 < horizon:
                s = _draw(cum_p[s, a], u[i, h + 1, 0])
    return states, actions


def _draw_rows(cum_rows, u):
    idx = (cum_rows <= u[:, None]).sum(axis=1)
    return np.minimum(idx, cum_rows.shape[1] - 1)


def _sample_paths_np(cum_rho, cum_pi, cum_p, u):
    n, horizon = u.shape[0], u.shape[1]
    states = np.empty((n, horizon), dtype=np.int64)
    actions = np.empty((n, horizon), dtype=np.int64)
    s = _draw_rows(np.broadcast_to(cum_rho, (n, cum_rho.shape[0])), u[:, 0, 0])
    for h in range(horizon):
        a = _draw_rows(cum_pi[s], u[:, h, 1])
        states[:, h] = s
        actions[:, h] = a
        if h + 1 < horizon:
            s = _draw_rows(cum_p[s, a], u[:, h + 1, 0])
    return states, actions


def sample_paths(cum_rho, cum_pi, cum_p, u):
    """Roll out ``u.shape[0]`` paths of length ``u.shape[1]``.

    ``u[i, h, 0]`` picks the state at step h (from rho when h == 0, else from the
    transition row), ``u[i, h, 1]`` picks the action.
    """
    if get_backend() == "numba":
        return _sample_paths_nb(cum_rho, cum_pi, cum_p, u)
    return _sample_paths_np(cum_rho, cum_pi, cum_p, u)


# -- discounted visitation ----------------------------------------------------


@njit
def _discounted_counts_nb(states, actions, discounts, num_states, num_actions):
    out = np.zeros(num_states * num_actions)
    n, horizon = states.shape
    for i in range(n):
        for h in range(horizon):
            out[states[i, h] * num_actions + actions[i, h]] += discounts[h]
    return out.reshape(num_states, num_actions)


def _discounted_counts_np(states, actions, discounts, num_states, num_actions):
    idx = (states * num_actions + actions).ravel()
    w = np.broadcast_to(discounts, states.shape).ravel()
    out = np.bincount(idx, weights=w, minlength=num_states * num_actions)
    return out.reshape(num_states, num_actions)


def discounted_counts(states, actions, discounts, num_states, num_actions):
    """Sum over paths of sum_h discounts[h] * e_{s_h, a_h}, as an (S, A) table."""
    if get_backend() == "numba":
        return _discounted_counts_nb(states, actions, discounts, num_states, num_actions)
    return _discounted_counts_np(states, actions, discounts, num_states, num_actions)


# -- reward-to-go weights for the REINFORCE estimator -------------------------


@njit
def _rtg_weights_nb(states, actions, step_rewards, discounts, num_states, num_actions):
    out = np.zeros(num_states * num_actions)
    n, horizon = states.shape
    togo = np.empty(horizon)
    for i in range(n):
        acc = 0.0
        for h in range(horizon - 1, -1, -1):
            acc += step_rewards[i, h] * discounts[h]
            togo[h] = acc
        for h in range(horizon):
            out[states[i, h] * num_actions + actions[i, h]] += togo[h]
    return out.reshape(num_states, num_actions)


def _rtg_weights_np(states, actions, step_rewards, discounts, num_states, num_actions):
    disc_rew = step_rewards * discounts
    togo = np.cumsum(disc_rew[:, ::-1], axis=1)[:, ::-1]
    idx = (states * num_actions + actions).ravel()
    out = np.bincount(idx, weights=togo.ravel(), minlength=num_states * num_actions)
    return out.reshape(num_states, num_actions)


def rtg_weights(states, actions, step_rewards, discounts, num_states, num_actions):
    """W[s, a] = sum over paths and steps t with (s_t, a_t) = (s, a) of
    sum_{h >= t} discounts[h] * step_rewards[h].

    Contracting W against the score table gives the truncated policy gradient
    estimate summed over the paths.
    """
    if get_backend() == "numba":
        return _rtg_weights_nb(states, actions, step_rewards, discounts, num_states, num_actions)
    return _rtg_weights_np(states, actions, step_rewards, discounts, num_states, num_actions)


# -- occupancy probes and averaged SGD ----------------------------------------


@njit
def _pair_probe_nb(states, actions, pair_s, pair_a, discounts):
    n, horizon = states.shape
    out = np.zeros(n)
    for i in range(n):
        acc = 0.0
        for h in range(horizon):
            if states[i, h] == pair_s[i] and actions[i, h] == pair_a[i]:
                acc += discounts[h]
        out[i] = acc
    return out


def _pair_probe_np(states, actions, pair_s, pair_a, discounts):
    hit = (states == pair_s[:, None]) & (actions == pair_a[:, None])
    return hit.astype(np.float64) @ discounts


def pair_probe(states, actions, pair_s, pair_a, discounts):
    """Per path i: sum_h discounts[h] * 1{(s_h, a_h) = (pair_s[i], pair_a[i])}."""
    if get_backend() == "numba":
        return _pair_probe_nb(states, actions, pair_s, pair_a, discounts)
    return _pair_probe_np(states, actions, pair_s, pair_a, discounts)


@njit
def _averaged_sgd_nb(features, targets, beta, omega0):
    k_total, m = features.shape
    omega = omega0.copy()
    total = np.zeros(m)
    for k in range(k_total):
        pred = 0.0
        for j in range(m):
            pred += features[k, j] * omega[j]
        c = 2.0 * beta * (pred - targets[k])
        for j in range(m):
            omega[j] -= c * features[k, j]
            total[j] += omega[j]
    return total / k_total, omega


def _averaged_sgd_np(features, targets, beta, omega0):
    omega = omega0.copy()
    total = np.zeros_like(omega)
    for k in range(features.shape[0]):
        phi = features[k]
        omega -= (2.0 * beta * (phi @ omega - targets[k])) * phi
        total += omega
    return total / features.shape[0], omega


def averaged_sgd(features, targets, beta, omega0):
    """Least-squares SGD on rows ``features[k]`` with targets ``targets[k]``.

    Returns ``(mean of omega_1..omega_K, omega_K)``.
    """
    if get_backend() == "numba":
        return _averaged_sgd_nb(features, targets, float(beta), omega0)
    return _averaged_sgd_np(features, targets, float(beta), omega0)


# -- fused N-VR-PG iterations (tabular softmax) --------------------------------

FUSED_OK, FUSED_WEIGHT_BOUND, FUSED_ROW_GUARD, FUSED_NONFINITE = 0, 1, 2, 3


@njit
def _log_softmax_rows(theta, num_states, num_actions, out):
    for s in range(num_states):
        base = s * num_actions
        zmax = theta[base]
        for a in range(1, num_actions):
            zmax = max(zmax, theta[base + a])
        tot = 0.0
        for a in range(num_actions):
            tot += np.exp(theta[base + a] - zmax)
        lse = np.log(tot)
        for a in range(num_actions):
            out[s, a] = (theta[base + a] - zmax) - lse


@njit
def _tabular_pg(states, actions, probs, reward, discounts, togo, out):
    """out[:] = truncated REINFORCE estimate for one path, tabular softmax scores."""
    num_states, num_actions = probs.shape
    horizon = states.shape[0]
    acc = 0.0
    for h in range(horizon - 1, -1, -1):
        acc += reward[states[h], actions[h]] * discounts[h]
        togo[h] = acc
    w = np.zeros((num_states, num_actions))
    for h in range(horizon):
        w[states[h], actions[h]] += togo[h]
    for s in range(num_states):
        row = 0.0
        for a in range(num_actions):
            row += w[s, a]
        for a in range(num_actions):
            out[s * num_actions + a] = w[s, a] - probs[s, a] * row


@njit
def nvrpg_tabular_chunk(theta, theta_prev, lam, d, r_cur, r_prev, u, alphas, etas, alpha_prev,
                        cum_rho, cum_p, discounts, sigma, log_bound_coef, snap_mask, snaps):
    """Run len(etas) general-utility N-VR-PG iterations in place.

    ``sigma > 0`` selects the log-barrier reward 1/(row sum + sigma); ``sigma <= 0``
    keeps ``r_cur`` fixed (linear utility).  State arrays are updated in place.
    Returns (status, iterations done, log_w, d_norm, step_err, min_lam, zero_steps).
    """
    num_states, num_actions = lam.shape
    n, horizon = u.shape[0], u.shape[1]
    dim = theta.shape[0]
    logp = np.empty((num_states, num_actions))
    logp_prev = np.empty((num_states, num_actions))
    probs = np.empty((num_states, num_actions))
    probs_prev = np.empty((num_states, num_actions))
    cum_pi = np.empty((num_states, num_actions))
    states = np.empty(horizon, dtype=np.int64)
    actions = np.empty(horizon, dtype=np.int64)
    lam_tau = np.zeros((num_states, num_actions))
    g_cur = np.empty(dim)
    g_old = np.empty(dim)
    togo = np.empty(horizon)
    r_new = np.empty((num_states, num_actions))
    out_logw = np.zeros(n)
    out_dnorm = np.zeros(n)
    out_err = np.zeros(n)
    min_lam = np.inf
    zero_steps = 0
    k_snap = 0
    _log_softmax_rows(theta_prev, num_states, num_actions, logp_prev)
    for s in range(num_states):
        for a in range(num_actions):
            probs_prev[s, a] = np.exp(logp_prev[s, a])
    for j in range(n):
        _log_softmax_rows(theta, num_states, num_actions, logp)
        for s in range(num_states):
            acc = 0.0
            for a in range(num_actions):
                probs[s, a] = np.exp(logp[s, a])
                acc += probs[s, a]
                cum_pi[s, a] = acc
            for a in range(num_actions):
                cum_pi[s, a] /= acc
        s = _draw(cum_rho, u[j, 0, 0])
        for h in range(horizon):
            a = _draw(cum_pi[s], u[j, h, 1])
            states[h] = s
            actions[h] = a
            if h + 1 < horizon:
                s = _draw(cum_p[s, a], u[j, h + 1, 0])
        lam_tau[:, :] = 0.0
        log_w = 0.0
        for h in range(horizon):
            lam_tau[states[h], actions[h]] += discounts[h]
            log_w += logp_prev[states[h], actions[h]] - logp[states[h], actions[h]]
        out_logw[j] = log_w
        if not np.isfinite(log_w) or log_w > log_bound_coef * alpha_prev + 1e-9:
            return FUSED_WEIGHT_BOUND, j, out_logw, out_dnorm, out_err, min_lam, zero_steps
        w = np.exp(log_w)
        eta = etas[j]
        row_min = np.inf
        for s in range(num_states):
            row = 0.0
            for a in range(num_actions):
                v = eta * lam_tau[s, a] + (1.0 - eta) * (lam[s, a] + lam_tau[s, a] * (1.0 - w))
                lam[s, a] = v
                row += v
                min_lam = min(min_lam, v)
            row_min = min(row_min, row)
            if sigma > 0:
                for a in range(num_actions):
                    r_new[s, a] = 1.0 / (row + sigma)
            else:
                for a in range(num_actions):
                    r_new[s, a] = r_cur[s, a]
        if sigma > 0 and row_min < -sigma / 2:
            return FUSED_ROW_GUARD, j, out_logw, out_dnorm, out_err, min_lam, zero_steps
        for s in range(num_states):
            for a in range(num_actions):
                if not np.isfinite(r_new[s, a]):
                    return FUSED_NONFINITE, j, out_logw, out_dnorm, out_err, min_lam, zero_steps
        _tabular_pg(states, actions, probs, r_cur, discounts, togo, g_cur)
        _tabular_pg(states, actions, probs_prev, r_prev, discounts, togo, g_old)
        sq = 0.0
        for i in range(dim):
            v = g_cur[i] - w * g_old[i]
            d[i] = eta * g_cur[i] + (1.0 - eta) * (d[i] + v)
            sq += d[i] * d[i]
        norm = np.sqrt(sq)
        out_dnorm[j] = norm
        if not np.isfinite(norm):
            return FUSED_NONFINITE, j, out_logw, out_dnorm, out_err, min_lam, zero_steps
        alpha = alphas[j]
        theta_prev[:] = theta
        if norm > 0.0:
            scale = alpha / norm
            moved = 0.0
            for i in range(dim):
                theta[i] = theta[i] + scale * d[i]
                diff = theta[i] - theta_prev[i]
                moved += diff * diff
            out_err[j] = abs(np.sqrt(moved) - alpha)
        else:
            zero_steps += 1
        alpha_prev = alpha
        logp_prev[:, :] = logp
        probs_prev[:, :] = probs
        r_prev[:, :] = r_cur
        r_cur[:, :] = r_new
        if snap_mask[j]:
            snaps[k_snap, :] = theta
            k_snap += 1
    return FUSED_OK, n, out_logw, out_dnorm, out_err, min_lam, zero_steps
