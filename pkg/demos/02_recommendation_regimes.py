"""
When does recommending pay off?
===============================

For one customer and two products the optimal recommendation intensity is
available in closed form except in a narrow band, where we fall back to a
grid. Sweep relative marketing efficiency (willingness gap between the
products) against relative profitability (exposure gap) and print the map.
"""

import numpy as np

from invrec.analytic import SinglePeriodInstance, optimal_alpha_given_q, regime_map

base = SinglePeriodInstance(p=2.0, h=0.1, b=0.5, r=1.0, cap=2.0, r0=(0.0, 0.0))
rme = np.linspace(-1.5, 1.5, 7)
rmp = np.linspace(0.0, base.critical, 6)
rows = regime_map(base, rme, rmp, step=1e-2)

print("rows: RME, columns: RMP; entries: intensity on product 1 (regime initial)")
print("       " + " ".join(f"{x:6.2f}" for x in rmp))
for i, e in enumerate(rme):
    cells = rows[i * len(rmp):(i + 1) * len(rmp)]
    print(f"{e:6.2f} " + " ".join(f"{c['alpha_star_1']:5.2f}{c['regime'][0]}" for c in cells))

# one worked point away from the grid
inst = SinglePeriodInstance(p=2.0, h=0.1, b=0.5, r=1.0, cap=2.0, r0=(0.0, 0.5))
alpha, regime = optimal_alpha_given_q(inst, (1.0, 0.0))
print("orders (1, 0), rival willingness 0.5:", np.round(alpha, 5), regime)
