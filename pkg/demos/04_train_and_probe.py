"""
Training the two agents and probing what they learned
=====================================================

A short cooperative run (the acceptance sweeps use 300 iterations and 20
seeds). Afterwards we shake demand and willingness with a sinusoid and look
at how recommendations and orders respond.

Takes a few minutes on one core. Pass an iteration count to change it.
"""

import sys

import numpy as np

from invrec.env import EnvConfig, Perturbation
from invrec.harness import behavioral_stats, perturbation_probe, rollout_trajectory
from invrec.marl import Trainer, TrainerConfig

iterations = int(sys.argv[1]) if len(sys.argv) > 1 else 60
env = EnvConfig()
trainer = Trainer(env, TrainerConfig(iterations=iterations), seed=0)
result = trainer.train(callback=lambda tr, p: print(f"iteration {p.iteration:3d}  eval profit "
                                                    f"{p.metrics.mean_profit:9.2f}"))

records = rollout_trajectory(env, result.agents, seed=1)
stats = behavioral_stats(records, env.willingness_cap)
print("net inventory / recommendation correlation per product pair:")
print(np.round(stats.inv_rec, 3))

for target in ("demand", "willingness"):
    rep = perturbation_probe(env, result.agents, Perturbation(target, 2.0, 10))
    print(f"{target:11s} shock: lagged correlations {np.round(rep.correlations, 2)}  extreme {rep.extreme:+.3f}")
