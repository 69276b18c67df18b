"""Command line entry point: ``nvrpg run | audit | envcheck``."""

from __future__ import annotations

import argparse
import logging
import sys

from nvrpg.errors import ConfigError


def _cmd_run(args) -> int:
    from nvrpg.harness import load_config, run_experiment

    overrides = {}
    if args.seed_override:
        overrides["seeds"] = ",".join(args.seed_override)
    if args.out:
        overrides["out_dir"] = args.out
    cfg = load_config(args.config, overrides)
    result = run_experiment(cfg)
    for r in result.seeds:
        print(f"seed {r.seed}: {r.status} -> {r.path}")
    print(f"summary: {result.summary_path}")
    return 0 if result.ok else 3


def _cmd_audit(args) -> int:
    from nvrpg.audit import audit_invariants

    report = audit_invariants(args.scope, args.budget)
    print(report.render())
    return 0 if report.passed else 1


def _cmd_envcheck(args) -> int:
    import numpy as np

    from nvrpg.mdp import load_mdp

    try:
        mdp = load_mdp(args.mdp)
    except OSError as exc:
        print(f"error: cannot read {args.mdp}: {exc.strerror}", file=sys.stderr)
        return 2
    except (ValueError, KeyError, TypeError) as exc:
        print(f"invalid MDP: {exc}", file=sys.stderr)
        return 2
    print(f"ok: {mdp.num_states} states, {mdp.num_actions} actions, gamma={mdp.discount}, "
          f"min rho={float(np.min(mdp.initial_dist)):.4g}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    from nvrpg.audit import DEFAULT_BUDGET, SCOPES

    parser = argparse.ArgumentParser(prog="nvrpg", description="Normalized variance-reduced policy gradient runs.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment config")
    run.add_argument("--config", required=True, help="key=value config file")
    run.add_argument("--seed-override", nargs="+", metavar="SEED", help="replace the config's seed list")
    run.add_argument("--out", help="output directory (overrides out_dir)")
    run.set_defaults(func=_cmd_run)

    audit = sub.add_parser("audit", help="check the library's invariants end to end")
    audit.add_argument("--scope", choices=SCOPES, default="all")
    audit.add_argument("--budget", type=int, default=DEFAULT_BUDGET, help="samples per statistical check")
    audit.set_defaults(func=_cmd_audit)

    env = sub.add_parser("envcheck", help="validate an MDP JSON file")
    env.add_argument("--mdp", required=True)
    env.set_defaults(func=_cmd_envcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
