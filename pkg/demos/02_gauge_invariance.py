"""Hidden-unit rescaling leaves a ReLU network's function unchanged.

Because relu(a z) = a relu(z) for a > 0, scaling the rows of one layer and
the columns of the next by the inverse gives a different parameter vector
with identical outputs.  The constraint solver finds which scales are free;
here we sample some and compare the outputs and the ordinary gradients.
"""

import numpy as np

from ucgsd import apply_gauge, forward, loss_and_grad, mlp, sample_gauge, solve_gauge_constraints

net = mlp([8, 16, 16, 4], seed=0)
classes = solve_gauge_constraints(net)
print("free hidden-unit groups:", classes.free_groups())
print("free scale variables:", classes.n_free)

rng = np.random.default_rng(1)
x = rng.normal(size=(8, 64))
target = rng.normal(size=(4, 64))
y = forward(net, x).output
_, g, _ = loss_and_grad(net, x, target)

for seed in range(3):
    s = sample_gauge(classes, seed, log_range=3.0)
    twin = apply_gauge(net, s)
    y_twin = forward(twin, x).output
    _, g_twin, _ = loss_and_grad(twin, x, target)
    out_dev = np.abs(y_twin - y).max() / np.abs(y).max()
    w_ratio = np.linalg.norm(twin["fc2"].params["w"]) / np.linalg.norm(net["fc2"].params["w"])
    g_ratio = np.linalg.norm(g_twin["fc2.w"]) / np.linalg.norm(g["fc2.w"])
    print(f"gauge {seed}: output deviation {out_dev:.1e}, "
          f"|W2| changed x{w_ratio:.3g}, |dL/dW2| changed x{g_ratio:.3g}")

print("\nSame function, very different weights and gradients: plain gradient")
print("descent therefore takes different paths from equivalent starting points.")
