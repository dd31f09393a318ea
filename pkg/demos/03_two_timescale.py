"""
Two-timescale stochastic approximation
======================================

Orders move on the fast step and recommendations on the slow one. With
sampled gradients the iterates settle near the joint optimum; swapping the
schedules shows what the separation buys.
"""

import numpy as np

from invrec.analytic import optimal_alpha_given_q, optimal_q_given_alpha
from invrec.analytic import SinglePeriodInstance
from invrec.sa import StepSchedule, run_sa, timescale_report

inst = SinglePeriodInstance(p=2.0, h=0.5, b=0.5, r=0.2, cap=4.0, r0=(1.0, -1.0), q_max=2.0)
n = 20_000
fast, slow = StepSchedule(0.05, 0.7, n), StepSchedule(0.01, 0.9, n)

state = run_sa(inst, fast, slow, n, batch=16, seed=0, record_every=2_000)
for row in state.trace:
    print(f"n={row[0]:6d}  q=({row[1]:.3f}, {row[2]:.3f})  alpha=({row[3]:.3f}, {row[4]:.3f})  "
          f"profit={row[7]:.4f}")

q_resp = optimal_q_given_alpha(inst, state.alpha)
alpha_star, regime = optimal_alpha_given_q(inst, q_resp)
print("fractile response", q_resp, "| optimal intensity", np.round(alpha_star, 4), regime)

rep = timescale_report(inst, fast, slow, 5_000)
for name, (q, a) in rep.items():
    print(f"{name:9s} q={np.round(q, 3)} alpha={np.round(a, 3)}")
