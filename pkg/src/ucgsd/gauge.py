"""The diagonal rescaling gauge of a network and paired-trajectory checks.

Every node output (tensor edge) carries one positive scale per channel.
Structural nodes tie those scales together: elementwise nodes and gains keep
the scale, addition forces both operands and the result to share it, and
concat / split / permute / flatten just re-index it.  Scale variables are
partitioned with a union-find; classes that touch the network input or the
terminal node are pinned to 1.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConstraintViolationError, NumericError, ShapeError
from .graph import (
    Add,
    AffineGain,
    Concat,
    Conv2d,
    Dense,
    Flatten,
    Nonlin,
    Output,
    Permute,
    Split,
)
from .optim import Optimizer, batch_schedule, train_step

__all__ = [
    "UnionFind",
    "GaugeClasses",
    "GaugeAssignment",
    "EquivarianceReport",
    "solve_gauge_constraints",
    "sample_gauge",
    "identity_gauge",
    "apply_gauge",
    "parameter_deviation",
    "check_trajectory_equivariance",
]

EPS_DEN = 1e-30


class UnionFind:
    def __init__(self, n):
        self.parent = list(range(n))
        self.rank = [0] * n

    def find(self, x):
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, x, y):
        x, y = self.find(x), self.find(y)
        if x == y:
            return
        if self.rank[x] < self.rank[y]:
            x, y = y, x
        self.parent[y] = x
        if self.rank[x] == self.rank[y]:
            self.rank[x] += 1


@dataclass
class GaugeClasses:
    """Partition of per-channel edge scales into classes.

    ``class_of[name][c]`` is the class id of channel ``c`` on edge ``name``;
    ``pinned[k]`` says whether class ``k`` is fixed to 1.
    """

    class_of: dict
    pinned: np.ndarray

    @property
    def n_classes(self):
        return int(self.pinned.size)

    @property
    def n_free(self):
        return int(np.count_nonzero(~self.pinned))

    def free_groups(self):
        """Edges grouped by shared free classes (one group per hidden 'layer')."""
        edges = list(self.class_of)
        uf = UnionFind(len(edges))
        owner = {}
        for i, name in enumerate(edges):
            for k in np.unique(self.class_of[name]):
                if self.pinned[k]:
                    continue
                if k in owner:
                    uf.union(owner[k], i)
                else:
                    owner[k] = i
        groups = {}
        for k, i in owner.items():
            groups.setdefault(uf.find(i), set()).update(
                e for e in edges if np.any(self.class_of[e] == k)
            )
        return sorted((sorted(g) for g in groups.values()), key=lambda g: g[0])


@dataclass
class GaugeAssignment:
    """Positive per-channel scale vector for every edge of a network."""

    scales: dict

    def __getitem__(self, name):
        return self.scales[name]

    def compose(self, other):
        """Elementwise product: applying ``self`` then ``other``."""
        return GaugeAssignment({k: v * other.scales[k] for k, v in self.scales.items()})

    def inverse(self):
        return GaugeAssignment({k: 1.0 / v for k, v in self.scales.items()})


def solve_gauge_constraints(net):
    offsets = {}
    total = 0
    for node in net.nodes:
        offsets[node.name] = total
        total += net.shapes[node.name][0]

    def idx(name):
        n = net.shapes[name][0]
        return np.arange(offsets[name], offsets[name] + n)

    uf = UnionFind(total)
    pinned_vars = list(idx(net.input.name))
    for node in net.nodes[1:]:
        out = idx(node.name)
        ins = [idx(s) for s in node.inputs]
        if isinstance(node, (Dense, Conv2d)):
            continue
        if isinstance(node, (Nonlin, AffineGain, Output)):
            pairs = zip(out, ins[0])
        elif isinstance(node, Add):
            pairs = list(zip(out, ins[0])) + list(zip(out, ins[1]))
        elif isinstance(node, Concat):
            pairs = zip(out, np.concatenate(ins))
        elif isinstance(node, Split):
            pairs = zip(out, ins[0][node.start:node.stop])
        elif isinstance(node, Permute):
            pairs = zip(out, ins[0][node.perm])
        elif isinstance(node, Flatten):
            s = net.shapes[node.inputs[0]]
            pairs = zip(out, np.repeat(ins[0], s[1] * s[2]))
        else:
            raise ShapeError(f"no gauge rule for node kind {node.kind!r}")
        for a, b in pairs:
            uf.union(int(a), int(b))
        if isinstance(node, Output):
            pinned_vars.extend(out)

    roots = np.array([uf.find(i) for i in range(total)])
    _, labels = np.unique(roots, return_inverse=True)
    pinned = np.zeros(labels.max() + 1, dtype=bool)
    pinned[labels[np.array(pinned_vars, dtype=np.int64)]] = True
    class_of = {n.name: labels[idx(n.name)] for n in net.nodes}
    return GaugeClasses(class_of, pinned)


def sample_gauge(classes, seed, log_range):
    """Draw ``exp(u)``, ``u ~ U[-log_range, log_range]``, per free class."""
    if log_range < 0:
        raise ValueError("log_range must be nonnegative")
    rng = np.random.default_rng(seed)
    u = rng.uniform(-log_range, log_range, size=classes.n_classes)
    u[classes.pinned] = 0.0
    vals = np.exp(u)
    return GaugeAssignment({k: vals[c] for k, c in classes.class_of.items()})


def identity_gauge(net):
    return GaugeAssignment({n.name: np.ones(net.shapes[n.name][0]) for n in net.nodes})


def _validate(net, s, rtol=1e-12):
    classes = solve_gauge_constraints(net)
    for name, cls in classes.class_of.items():
        v = np.asarray(s.scales.get(name), dtype=np.float64)
        if v.shape != cls.shape:
            raise ConstraintViolationError(f"edge {name!r}: expected {cls.size} scales")
        if np.any(~(v > 0)):
            raise ConstraintViolationError(f"edge {name!r}: scales must be positive")
    flat_cls = np.concatenate(list(classes.class_of.values()))
    flat_val = np.concatenate([np.asarray(s.scales[k], dtype=np.float64) for k in classes.class_of])
    ref = np.ones(classes.n_classes)
    ref[flat_cls] = flat_val
    ref[classes.pinned] = 1.0
    if not np.allclose(flat_val, ref[flat_cls], rtol=rtol, atol=0.0):
        raise ConstraintViolationError("gauge assignment violates a structural constraint")


def apply_gauge(net, s, check=True):
    """Return a copy of ``net`` reparameterized by the gauge ``s``.

    Dense weights become ``S_out W S_in^-1``, kernels are scaled per channel,
    biases and gain shifts scale like their output, gains are unchanged.
    """
    if check:
        _validate(net, s)
    out = net.copy()
    for node in out.nodes:
        if not node.params:
            continue
        s_out = s[node.name]
        if isinstance(node, Dense):
            s_in = s[node.inputs[0]]
            node.params["w"] = s_out[:, None] * node.params["w"] / s_in[None, :]
        elif isinstance(node, Conv2d):
            s_in = s[node.inputs[0]]
            node.params["k"] = (s_out[:, None, None, None] * node.params["k"]
                                / s_in[None, :, None, None])
        if isinstance(node, AffineGain):
            node.params["c"] = s_out * node.params["c"]
        elif "b" in node.params:
            node.params["b"] = s_out * node.params["b"]
    return out


def parameter_deviation(twin, net, s):
    """Largest ``||P~ - gauge(P)|| / max(||P||, eps)`` over all parameters."""
    expected = apply_gauge(net, s, check=False).params()
    base = net.params()
    worst = 0.0
    for key, p in twin.params().items():
        num = np.linalg.norm(p - expected[key])
        den = max(np.linalg.norm(base[key]), EPS_DEN)
        worst = max(worst, float(num / den))
    return worst


@dataclass
class EquivarianceReport:
    weight_dev: np.ndarray
    loss_gap: np.ndarray
    optimizer: str
    gauge_seed: int = None
    diverged: bool = False
    losses: np.ndarray = field(default=None, repr=False)

    @property
    def max_weight_dev(self):
        return float(np.max(self.weight_dev)) if self.weight_dev.size else 0.0

    @property
    def max_loss_gap(self):
        return float(np.max(self.loss_gap)) if self.loss_gap.size else 0.0

    def to_csv(self, path, digest=""):
        with open(path, "w") as fh:
            fh.write(f"# config_sha256={digest} optimizer={self.optimizer} gauge_seed={self.gauge_seed}\n")
            fh.write("step,max_weight_dev,loss_gap\n")
            for t, (dv, lg) in enumerate(zip(self.weight_dev, self.loss_gap)):
                fh.write(f"{t},{float(dv)!r},{float(lg)!r}\n")


def _batch(a, idx):
    return a[..., idx]


def check_trajectory_equivariance(net, s, dataset, config, steps, batch_size=32,
                                  seed=0, gauge_seed=None):
    """Train ``net`` and ``apply_gauge(net, s)`` in lockstep and compare.

    At each step ``t`` the loss gap is measured on the step's batch before
    the update, and the parameter deviation after it.  A non-finite loss
    marks the report as diverged and fills the remaining steps with ``inf``.
    """
    x, y = dataset
    a = net.copy()
    b = apply_gauge(net, s)
    opt_a, opt_b = Optimizer(config), Optimizer(config)
    schedule = batch_schedule(x.shape[-1], batch_size, steps, seed)
    dev = np.full(steps, np.inf)
    gap = np.full(steps, np.inf)
    losses = np.full(steps, np.nan)
    diverged = False
    for t, idx in enumerate(schedule):
        xb, yb = _batch(x, idx), _batch(y, idx)
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                la, _ = train_step(a, opt_a, xb, yb)
                lb, _ = train_step(b, opt_b, xb, yb)
            for p in (*a.params().values(), *b.params().values()):
                if not np.all(np.isfinite(p)):
                    raise NumericError("non-finite parameter")
        except (NumericError, FloatingPointError, ArithmeticError):
            diverged = True
            break
        if not (np.isfinite(la) and np.isfinite(lb)):
            diverged = True
            break
        losses[t] = la
        gap[t] = abs(lb - la) / max(abs(la), EPS_DEN)
        dev[t] = parameter_deviation(b, a, s)
    return EquivarianceReport(dev, gap, opt_a.config.kind, gauge_seed, diverged, losses)
