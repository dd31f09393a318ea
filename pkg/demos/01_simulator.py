"""
Stepping the inventory and recommendation simulator
===================================================

Two products, five customers, two-period lead time. We hold a constant
policy, watch stock and backlog move, then switch recommendations on for
the first product without ordering more of it. Demand follows the
recommendation, the extra units go to backlog and the episode profit drops:
recommending only pays when replenishment keeps up.
"""

import numpy as np

from invrec.env import Env, EnvConfig, JointAction

cfg = EnvConfig(horizon=20)
print("observation size", cfg.obs_dim, "| order cap", cfg.order_cap, "| backlog cap", cfg.backlog_cap)


def run(recs, seed=7):
    env = Env(cfg, seed)
    env.reset()
    total = 0.0
    for t in range(cfg.horizon):
        out = env.step(JointAction(np.array([2.0, 2.0]), recs))
        total += out.reward
        if t % 5 == 0:
            s = out.new_state
            print(f"  t={t:2d} demand={out.demand} sales={out.sales} on_hand={s.on_hand} backlog={s.backlog}")
    return total


# no recommendations at all
print("idle recommender:")
idle = run(np.zeros((2, 5)))

# push product 1 to every customer; willingness climbs toward the cap
print("recommend product 1:")
push = np.zeros((2, 5))
push[0] = 0.8
pushed = run(push)

print(f"episode profit idle {idle:.2f} vs pushed {pushed:.2f}")
