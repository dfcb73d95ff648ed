"""Grad-MPC and CEM against the Riccati optimum on the LQR task, plus the candidate-count ablation.

    python3 scripts/lqr_planners.py --starts 5 --ablation-seeds 20
"""

import argparse
import time

import numpy as np

from gradplan import autodiff as ad
from gradplan.config import ExperimentConfig, PlannerConfig
from gradplan.envs import LQREnv, lqr_optimal, rollout_cost
from gradplan.harness import ablate_candidates
from gradplan.models import LinearDynamics
from gradplan.planners import optimize_cem, optimize_grad_mpc


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--starts", type=int, default=5)
    parser.add_argument("--ablation-seeds", type=int, default=20)
    parser.add_argument("--candidates", default="10,100,1000")
    args = parser.parse_args()

    env, model = LQREnv(), LinearDynamics.from_env()
    print("start  optimal      grad-mpc     cem          gap_gm    gap_cem")
    for seed in range(args.starts):
        x0 = env.reset(seed)[0].x
        _, opt = lqr_optimal(x0, 12, env)
        cfg = PlannerConfig(seed=seed)
        g = rollout_cost(env, x0, optimize_grad_mpc(ad.Node(x0), model, cfg).best.actions)
        c = rollout_cost(env, x0, np.clip(optimize_cem(ad.Node(x0), model, cfg).mean, -1, 1))
        print(f"{seed:>5}  {opt:<11.6f}  {g:<11.6f}  {c:<11.6f}  {(g - opt) / opt:<8.1e}  {(c - opt) / opt:.1e}")

    t = time.perf_counter()
    counts = [int(j) for j in args.candidates.split(",")]
    report = ablate_candidates(ExperimentConfig(env="lqr", model="true"), counts, range(args.ablation_seeds))
    print("\ncandidates  median return")
    for j, m in zip(report.candidates, report.medians):
        print(f"{j:>10}  {m:.6f}")
    print(f"monotone: {report.monotone} ({time.perf_counter() - t:.0f}s)")


if __name__ == "__main__":
    main()
