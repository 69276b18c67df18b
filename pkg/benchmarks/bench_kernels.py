#!/usr/bin/env python3
"""Time each kernel under the numba and numpy backends.

Numba is warmed up first so compilation stays out of the numbers.  Both
backends get identical inputs and their outputs are compared before timing.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--json out.json]
"""

import argparse
import json
import time

import numpy as np

from nvrpg import _backend, kernels
from nvrpg.gridworld import build_gridworld, frozen_lake_8x8
from nvrpg.mdp import make_rng


def _cases(rng):
    mdp = build_gridworld(frozen_lake_8x8())
    n_s, n_a = mdp.num_states, mdp.num_actions
    probs = rng.dirichlet(np.ones(n_a), size=n_s)
    cum_pi = kernels.cumulative_table(probs)
    n, horizon = 256, 81
    u = rng.random((n, horizon, 2))
    disc = mdp.discounts(horizon)
    states, actions = kernels._sample_paths_nb(mdp.cum_initial, cum_pi, mdp.cum_transition, u)
    rewards = rng.random((n, horizon))
    pair_s = rng.integers(0, n_s, n)
    pair_a = rng.integers(0, n_a, n)
    feats = rng.standard_normal((2000, n_s * n_a)) / 16
    targets = rng.random(2000)
    return {
        "sample_paths": (kernels.sample_paths, (mdp.cum_initial, cum_pi, mdp.cum_transition, u)),
        "discounted_counts": (kernels.discounted_counts, (states, actions, disc, n_s, n_a)),
        "rtg_weights": (kernels.rtg_weights, (states, actions, rewards, disc, n_s, n_a)),
        "pair_probe": (kernels.pair_probe, (states, actions, pair_s, pair_a, disc)),
        "averaged_sgd": (kernels.averaged_sgd, (feats, targets, 0.05, np.zeros(n_s * n_a))),
    }


def _time(fn, args, repeat):
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def _same(a, b):
    if isinstance(a, tuple):
        return all(_same(x, y) for x, y in zip(a, b))
    return np.allclose(a, b, rtol=1e-12, atol=1e-12)


def _bench_loop(T=2000):
    """Whole general-utility runs: the compiled loop against the reference loop."""
    from nvrpg.algorithms import NvrpgConfig, run_nvrpg_general
    from nvrpg.policy import PolicyParams, TabularSoftmax
    from nvrpg.utilities import LogBarrierUtility

    mdp = build_gridworld(frozen_lake_8x8())
    p0 = PolicyParams(np.zeros(mdp.num_states * 4), TabularSoftmax(mdp.num_states, 4))
    util = LogBarrierUtility(0.125, 4)
    timings, thetas = {}, {}
    for engine in ("fused", "reference"):
        cfg = NvrpgConfig(T=T, alpha0=1.0, seed=0, log_every=T, engine=engine)
        run_nvrpg_general(mdp, p0, util, NvrpgConfig(T=5, alpha0=1.0, engine=engine))
        t0 = time.perf_counter()
        thetas[engine] = run_nvrpg_general(mdp, p0, util, cfg).theta
        timings[engine] = time.perf_counter() - t0
    match = bool(np.allclose(thetas["fused"], thetas["reference"], rtol=0, atol=1e-9))
    print(f"\nN-VR-PG loop, 8x8 lake, T={T}: fused {timings['fused']:.2f} s, "
          f"reference {timings['reference']:.2f} s, speedup {timings['reference'] / timings['fused']:.1f}, match {match}")
    return dict(kernel="nvrpg_general_loop", numba_s=timings["fused"], numpy_s=timings["reference"], match=match)


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--json", help="also write results here")
    args = parser.parse_args()
    if not _backend.HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")

    cases = _cases(make_rng(0))
    results = []
    print(f"{'kernel':<20}{'numba (ms)':>12}{'numpy (ms)':>12}{'speedup':>10}  match")
    for name, (fn, fn_args) in cases.items():
        _backend.set_backend("numba")
        out_nb = fn(*fn_args)  # warm-up / compile
        t_nb = _time(fn, fn_args, args.repeat)
        _backend.set_backend("numpy")
        out_np = fn(*fn_args)
        t_np = _time(fn, fn_args, args.repeat)
        match = _same(out_nb, out_np)
        results.append(dict(kernel=name, numba_s=t_nb, numpy_s=t_np, match=bool(match)))
        print(f"{name:<20}{t_nb * 1e3:>12.3f}{t_np * 1e3:>12.3f}{t_np / t_nb:>10.1f}  {match}")
    _backend.set_backend("numba")
    results.append(_bench_loop())
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(results, fh, indent=2)


if __name__ == "__main__":
    main()
