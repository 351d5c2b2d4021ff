"""Residual blocks, conv layers and biases under the gauge.

A residual add forces the skip path and the branch output to share scales,
so the solver merges their classes.  Conv kernels rescale per channel and
biases rescale like the output they feed.  The UC rules keep all of these
equivariant.  We also show the gauge-fixing projection, which maps every
member of a gauge class to one canonical network.
"""

import numpy as np

from ucgsd import (
    OptimizerConfig,
    apply_gauge,
    check_trajectory_equivariance,
    conv_net,
    gauge_fix_projection,
    residual_mlp,
    sample_gauge,
    solve_gauge_constraints,
    synthetic_regression,
)

res = residual_mlp(8, 16, [12, 12], 4, seed=0)
classes = solve_gauge_constraints(res)
print("residual net groups:")
for group in classes.free_groups():
    print("  ", group)

x, y = synthetic_regression(8, 4, seed=7)
rep = check_trajectory_equivariance(res, sample_gauge(classes, 1, 3.0), (x, y),
                                    OptimizerConfig("ucgsd", eta=0.002), steps=100)
print(f"residual UC-GSD deviation over 100 steps: {rep.max_weight_dev:.1e}")

conv = conv_net((2, 4, 4), channels=4, kernel=3, hidden=[8], n_out=4, seed=1, bias=True, padding=1)
rng = np.random.default_rng(2)
for node in conv.nodes:
    if "b" in node.params:
        node.params["b"] = rng.normal(0.0, 0.1, node.params["b"].shape)
xc, yc = synthetic_regression((2, 4, 4), 4, seed=7)
s = sample_gauge(solve_gauge_constraints(conv), 4, 3.0)
for kind, eta in [("ucgsd", 0.01), ("sgd", 0.01)]:
    rep = check_trajectory_equivariance(conv, s, (xc, yc), OptimizerConfig(kind, eta=eta), steps=100)
    print(f"conv+bias {kind:6s} deviation over 100 steps: {rep.max_weight_dev:.1e}")

proj = gauge_fix_projection(conv).params()
proj_twin = gauge_fix_projection(apply_gauge(conv, s)).params()
gap = max(np.linalg.norm(proj_twin[k] - v) / np.linalg.norm(v) for k, v in proj.items())
print(f"projection of the net vs. projection of its rescaled twin: {gap:.1e}")
