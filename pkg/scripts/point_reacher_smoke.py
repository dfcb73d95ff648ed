"""Train Grad-MPC with a learned world model on the point reacher and compare with the random policy.

    python3 scripts/point_reacher_smoke.py --out runs/reacher
    python3 scripts/point_reacher_smoke.py --episodes 50 --seeds 0
"""

import argparse
import dataclasses
from pathlib import Path

import numpy as np

from gradplan.config import build_experiment, load_config_file
from gradplan.envs import make_env
from gradplan.harness import random_baseline, run_training

CONFIG = Path(__file__).parent / "configs" / "point_reacher.cfg"


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", default=None)
    parser.add_argument("--episodes", type=int, default=None, help="total episodes including seed episodes")
    parser.add_argument("--seeds", default=None, help="comma-separated seeds")
    parser.add_argument("--workers", type=int, default=None)
    args = parser.parse_args()

    cfg = build_experiment(load_config_file(CONFIG))
    if args.episodes is not None:
        cfg = dataclasses.replace(cfg, total_steps=args.episodes * cfg.episode_length)
    if args.seeds is not None:
        cfg = dataclasses.replace(cfg, seeds=tuple(int(s) for s in args.seeds.split(",")))
    record = run_training(cfg, args.out, args.workers)
    print(record.to_csv())
    env = make_env(cfg.env, cfg.episode_length)
    finals = record.final_returns()
    ratios = []
    for seed in cfg.seeds:
        base = float(random_baseline(env, seed, cfg.eval_episodes).mean())
        ratios.append(base / finals[seed])
        print(f"seed {seed}: agent {finals[seed]:.1f}, random {base:.1f}, cost ratio {ratios[-1]:.2f}x")
    print(f"median cost ratio {np.median(ratios):.2f}x")


if __name__ == "__main__":
    main()
