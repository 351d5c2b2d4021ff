"""Train two gauge-equivalent networks side by side.

With UC-GSD the second network stays exactly the rescaled copy of the first
at every step (up to rounding).  Plain SGD, started from the same pair, drifts
apart immediately.
"""

import numpy as np

from ucgsd import (
    OptimizerConfig,
    check_trajectory_equivariance,
    mlp,
    sample_gauge,
    solve_gauge_constraints,
    synthetic_regression,
)

x, y = synthetic_regression(8, 4, n_samples=256, seed=7)
net = mlp([8, 16, 16, 4], seed=0)
s = sample_gauge(solve_gauge_constraints(net), seed=3, log_range=3.0)

for config in [OptimizerConfig("ucgsd", eta=0.02),
               OptimizerConfig("uc_momentum", eta=0.01, mu=0.9),
               OptimizerConfig("uc_adam", eta=0.003),
               OptimizerConfig("sgd", eta=0.01)]:
    rep = check_trajectory_equivariance(net, s, (x, y), config, steps=200, batch_size=32)
    finite = rep.losses[np.isfinite(rep.losses)]
    trend = f"loss {finite[0]:.3g} -> {finite[-1]:.3g}" if finite.size else "no finite loss"
    print(f"{config.kind:12s} max deviation {rep.max_weight_dev:9.2e}  "
          f"max loss gap {rep.max_loss_gap:9.2e}  diverged={rep.diverged}  {trend}")
