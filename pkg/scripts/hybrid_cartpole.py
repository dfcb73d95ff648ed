"""Policy+Grad-MPC on sparse cartpole swing-up, starting from a deliberately miscalibrated policy.

A hand-designed swing-up controller plays the competent policy; a value
network is fitted to its Monte-Carlo returns. The controller is then offset by
a constant action and the hybrid planner refines its actions against the
true dynamics and the fitted value.

    python3 scripts/hybrid_cartpole.py --seeds 20 --offset 0.3
"""

import argparse
import time

import numpy as np

from gradplan import autodiff as ad
from gradplan.config import PlannerConfig
from gradplan.envs import make_env
from gradplan.models import CartpoleDynamics
from gradplan.planners import plan_policy_grad_mpc
from gradplan.reference import SwingUpController, _features, collect_value_data, fit_value


def episode(env, act, seed):
    state, _ = env.reset(seed)
    total, done = 0.0, False
    while not done:
        state, _, r, done = env.step(state, act(state))
        total += r
    return total


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--seeds", type=int, default=20)
    parser.add_argument("--offset", type=float, default=0.3)
    parser.add_argument("--iterations", type=int, default=5)
    parser.add_argument("--lr", type=float, default=1e-3)
    args = parser.parse_args()

    env = make_env("cartpole_swingup_sparse")
    controller = SwingUpController.build()
    t = time.perf_counter()
    feats, targets = collect_value_data(controller, n_starts=40, length=125, horizon=300)
    value = fit_value(feats, targets, steps=2000)
    pred = value(ad.Node(feats)).value
    print(f"value fit R^2 {1 - np.mean((pred - targets) ** 2) / np.var(targets):.3f} ({time.perf_counter() - t:.0f}s)")

    cfg = PlannerConfig(horizon=1, candidates=1, iterations=args.iterations, action_lr_schedule=(args.lr,),
                        discount=0.99, lambda_=0.95)
    model = CartpoleDynamics(sparse=True)
    perturbed = controller.perturbed(args.offset)
    rows = []
    for seed in range(args.seeds):
        good = episode(env, lambda st: controller(_features(st.x)), seed)
        pure = episode(env, lambda st: perturbed(_features(st.x)), seed)
        hyb = episode(env, lambda st: plan_policy_grad_mpc(ad.Node(st.x.copy()), model, perturbed, value, cfg), seed)
        rows.append((good, pure, hyb))
        print(f"seed {seed:>2}: policy {good:6.0f}  perturbed {pure:6.0f}  policy+grad-mpc {hyb:6.0f}", flush=True)
    med = np.median(np.array(rows), axis=0)
    print(f"median: policy {med[0]:.0f}  perturbed {med[1]:.0f}  policy+grad-mpc {med[2]:.0f}")


if __name__ == "__main__":
    main()
