"""Command-line entry point: ``gradplan {train,eval,compare,ablate-candidates,gradcheck}``.

Every config-file key is also a flag (``--planning-horizon 12``); flags override
``--config`` values. The exit status is 0 only when the command's self-checks
pass.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from .checks import format_results, timed_gradchecks
from .config import KEYS, ConfigError, ExperimentConfig, build_experiment, config_to_pairs, load_config_file
from .harness import (Controller, ablate_candidates, compare_planners, evaluate, load_actor_critic, random_baseline,
                      run_training, _experiment_env)
from .world_model import load_rssm


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", action="append", default=[], help="key-value config file (repeatable)")
    group = p.add_argument_group("config keys")
    for key in KEYS:
        group.add_argument(f"--{key}", dest=f"key:{key}", metavar="VALUE", default=None)


def _experiment(args) -> ExperimentConfig:
    pairs: dict[str, str] = {}
    for path in args.config:
        pairs.update(load_config_file(path))
    for key in KEYS:
        value = getattr(args, f"key:{key}")
        if value is not None:
            pairs[key] = value
    return build_experiment(pairs)


def _cmd_train(args) -> int:
    cfg = _experiment(args)
    out = Path(args.out)
    record = run_training(cfg, out, args.workers)
    (out / "config.txt").write_text("".join(f"{k} {v}\n" for k, v in config_to_pairs(cfg).items()))
    sys.stdout.write(record.to_csv())
    problems = record.check()
    for p in problems:
        print(f"check failed: {p}", file=sys.stderr)
    return 0 if not problems else 1


def _cmd_eval(args) -> int:
    cfg = _experiment(args)
    env = _experiment_env(cfg)
    ckpt = Path(args.checkpoint)
    ok = True
    print("seed,return_mean,return_std,random_mean")
    for seed in cfg.seeds:
        rssm = ac = None
        if cfg.model == "learned" and cfg.planner != "random":
            rssm = load_rssm(ckpt / f"seed_{seed}_rssm.gpck")
            if cfg.planner in ("policy", "policy-grad-mpc"):
                ac = load_actor_critic(ckpt / f"seed_{seed}_actor_critic.gpck")
        pcfg = dataclasses.replace(cfg.planner_cfg, seed=seed)
        returns = evaluate(env, Controller(cfg.planner, env, pcfg, rssm, ac, args.workers), seed, 0, cfg.eval_episodes)
        base = random_baseline(env, seed, cfg.eval_episodes)
        ok &= bool(np.all(np.isfinite(returns)))
        print(f"{seed},{returns.mean():.17g},{returns.std():.17g},{base.mean():.17g}")
    return 0 if ok else 1


def _cmd_compare(args) -> int:
    base = _experiment(args)
    planners = [p.strip() for p in args.planners.split(",") if p.strip()]
    configs = [dataclasses.replace(base, planner=p) for p in planners]
    report = compare_planners(configs, planners, args.out, args.workers)
    print(report.table())
    if args.json:
        Path(args.json).write_text(json.dumps([dataclasses.asdict(r) for r in report.rows], indent=2))
    ok = all(np.isfinite(r.mean) for r in report.rows)
    return 0 if ok else 1


def _cmd_ablate(args) -> int:
    cfg = _experiment(args)
    counts = [int(j) for j in args.candidates_list.split(",")]
    report = ablate_candidates(cfg, counts, range(args.n_seeds), args.workers)
    print("candidates,median_return")
    for j, m in zip(report.candidates, report.medians):
        print(f"{j},{m:.17g}")
    print(f"monotone: {report.monotone}")
    return 0 if report.monotone else 1


def _cmd_gradcheck(args) -> int:
    results, seconds = timed_gradchecks(instances=args.instances, seed=args.seed)
    print(format_results(results, seconds))
    return 0 if all(r.ok for r in results) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gradplan", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train with the planner in the loop and write a CSV record")
    _add_config_flags(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--workers", type=int, default=None)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate checkpoints written by train")
    _add_config_flags(p)
    p.add_argument("--checkpoint", default=".", help="directory holding seed_<n>_*.gpck files")
    p.add_argument("--workers", type=int, default=None)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("compare", help="rank planners on a shared environment and budget")
    _add_config_flags(p)
    p.add_argument("--planners", default="grad-mpc,cem,random")
    p.add_argument("--out", default=None)
    p.add_argument("--json", default=None, help="also write the report as JSON")
    p.add_argument("--workers", type=int, default=None)
    p.set_defaults(func=_cmd_compare)

    p = sub.add_parser("ablate-candidates", help="Grad-MPC return versus candidate count")
    _add_config_flags(p)
    p.add_argument("--candidates-list", default="10,100,1000")
    p.add_argument("--n-seeds", type=int, default=20)
    p.add_argument("--workers", type=int, default=None)
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference checks of every differentiable op")
    p.add_argument("--instances", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
