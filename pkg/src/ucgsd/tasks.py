"""Small seeded datasets for the experiment runner (batch on the last axis)."""

import numpy as np

from .errors import ConfigError

TASKS = ("synthetic_regression", "two_moons")


def synthetic_regression(input_shape, n_out, n_samples=256, teacher_width=16, seed=0):
    """Targets ``y = A relu(B x)`` for a fixed seeded teacher ``(A, B)``.

    ``x`` is standard normal with shape ``input_shape + (n_samples,)``; the
    teacher reads it flattened.
    """
    input_shape = (input_shape,) if np.isscalar(input_shape) else tuple(input_shape)
    rng = np.random.default_rng(seed)
    p = int(np.prod(input_shape))
    teacher_b = rng.normal(0.0, 1.0 / np.sqrt(p), size=(teacher_width, p))
    teacher_a = rng.normal(0.0, 1.0 / np.sqrt(teacher_width), size=(n_out, teacher_width))
    x = rng.normal(size=input_shape + (n_samples,))
    y = teacher_a @ np.maximum(teacher_b @ x.reshape(p, n_samples), 0.0)
    return x, y


def two_moons(n_samples=256, seed=0):
    """Two interleaved half circles, labels 0/1, no noise; shuffled by ``seed``."""
    n_outer = n_samples // 2
    n_inner = n_samples - n_outer
    t_out = np.linspace(0.0, np.pi, n_outer)
    t_in = np.linspace(0.0, np.pi, n_inner)
    x = np.concatenate([
        np.stack([np.cos(t_out), np.sin(t_out)]),
        np.stack([1.0 - np.cos(t_in), 0.5 - np.sin(t_in)]),
    ], axis=1)
    labels = np.concatenate([np.zeros(n_outer, dtype=np.int64), np.ones(n_inner, dtype=np.int64)])
    order = np.random.default_rng(seed).permutation(n_samples)
    return x[:, order], labels[order]


def make_task(name, input_shape, n_out, n_samples=256, seed=0):
    """Return ``(x, target, output_kind)`` for a task name."""
    if name == "synthetic_regression":
        x, y = synthetic_regression(input_shape, n_out, n_samples, seed=seed)
        return x, y, "mse"
    if name == "two_moons":
        if input_shape not in (2, (2,)) or n_out != 2:
            raise ConfigError("two_moons needs input 2 and output 2")
        x, y = two_moons(n_samples, seed)
        return x, y, "softmax_xent"
    raise ConfigError(f"unknown task {name!r}; expected one of {TASKS}")
