"""How layer budgets respond to the change each block makes to the CLS token.

Synthetic deltas: block 2's contribution shrinks over time while the
others grow slowly, so it loses tokens and eventually leaves the trainable set.
"""

import numpy as np

from alast.controller import BudgetController
from alast.vit import LayerTrace

L, K = 4, 3
controller = BudgetController(num_layers=L, num_patches=16, K=K, alpha=0.5)


def trace(delta):
    return LayerTrace(np.zeros((1, 1)), np.full((1, 1), np.sqrt(delta)), np.zeros((1, 1)), 2, 2, 0.0)


for step in range(20):
    deltas = [0.1 + 0.01 * step, 0.1 + 0.01 * step, max(0.0, 0.5 - 0.05 * step), 0.1 + 0.01 * step]
    schedule = controller.step([trace(d) for d in deltas])
    if step % 3 == 0 or step == 19:
        print(f"after step {step:>2}: budgets {np.round(controller.state.budgets, 3)}"
              f" retain {schedule.retain} trainable {schedule.trainable}")

# The sampled policy draws K blocks with probability proportional to budget.
sampled = BudgetController(num_layers=L, num_patches=16, K=2, alpha=0.5, policy="sampled", seed=1)
for step in range(4):
    print("sampled trainable set:", sampled.step([trace(0.1 * (step + l)) for l in range(L)]).trainable)
