"""UC-GSD and its stateful variants, Euclidean baselines, gauge fixing.

Every parameter ``P`` is paired with a positive *frame* ``F`` of the same
shape, built from the canonical scales of the layer that owns it
(``F = d e^T`` for a dense weight, ``d`` and ``e`` broadcast over the
spatial taps of a conv kernel, a covariant output scale for a bias).  Canonical coordinates
are ``P' = P / F`` and the canonical gradient is ``F * G``; a step taken in
canonical coordinates and pushed forward is ``P - eta * F**2 * G``.  Under a
gauge the frame transforms exactly like the parameter, which is what makes
the updates equivariant.
"""

from dataclasses import dataclass, fields, replace

import numpy as np

from .canon import canonicalize_kernel, rz_canonicalize
from .errors import ConfigError, ShapeError, UnsupportedStructureError
from .graph import (
    Add,
    AffineGain,
    Concat,
    Conv2d,
    Dense,
    Flatten,
    Input,
    Nonlin,
    Output,
    Permute,
    Split,
    loss_and_grad,
)

__all__ = [
    "UC_KINDS",
    "EUCLIDEAN_KINDS",
    "OptimizerConfig",
    "ParamState",
    "ucgsd_step",
    "ucgsd_bias_step",
    "ucgsd_conv_step",
    "uc_momentum_step",
    "uc_adam_step",
    "sgd_step",
    "sgd_momentum_step",
    "matrix_frame",
    "param_frames",
    "reference_scale",
    "Optimizer",
    "gauge_fix_projection",
    "batch_schedule",
    "train_step",
]

UC_KINDS = ("ucgsd", "uc_momentum", "uc_adam")
EUCLIDEAN_KINDS = ("sgd", "sgd_momentum")


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "ucgsd"
    eta: float = 0.01
    mu: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    refresh: str = "per_step"
    project: bool = False

    def __post_init__(self):
        if self.kind not in UC_KINDS + EUCLIDEAN_KINDS:
            raise ConfigError(f"unknown optimizer kind {self.kind!r}")
        if not self.eta > 0:
            raise ConfigError("eta must be positive")
        if not 0 <= self.mu < 1:
            raise ConfigError("mu must lie in [0, 1)")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("beta1 and beta2 must lie in [0, 1)")
        if not self.eps_adam > 0:
            raise ConfigError("eps_adam must be positive")
        if self.refresh not in ("per_step", "frozen"):
            raise ConfigError(f"refresh must be 'per_step' or 'frozen', got {self.refresh!r}")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown optimizer keys: {sorted(unknown)}")
        return cls(**d)

    @property
    def is_uc(self):
        return self.kind in UC_KINDS


@dataclass
class ParamState:
    velocity: np.ndarray = None
    m: np.ndarray = None
    v: np.ndarray = None
    frame: np.ndarray = None
    t: int = 0


def matrix_frame(w):
    dec = rz_canonicalize(w)
    return dec.d[:, None] * dec.e[None, :]


def _check(p, g):
    p = np.asarray(p, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if p.shape != g.shape:
        raise ShapeError(f"parameter {p.shape} and gradient {g.shape} differ")
    return p, g


def ucgsd_step(w, g, eta):
    """``W - eta * D^2 G E^2`` with ``D, E`` the canonical scales of ``W``."""
    w, g = _check(w, g)
    dec = rz_canonicalize(w)
    return w - eta * (dec.d ** 2)[:, None] * g * (dec.e ** 2)[None, :]


def ucgsd_bias_step(b, g_b, eta, d):
    b, g_b = _check(b, g_b)
    d = np.asarray(d, dtype=np.float64)
    if d.shape != b.shape:
        raise ShapeError(f"scale length {d.shape} does not match bias {b.shape}")
    return b - eta * d ** 2 * g_b


def ucgsd_conv_step(k, g_k, eta, d=None, e=None):
    """Kernel update with ``D^2``/``E^2`` broadcast over the spatial taps."""
    k, g_k = _check(k, g_k)
    if d is None or e is None:
        dec = canonicalize_kernel(k)
        d, e = dec.d, dec.e
    d, e = np.asarray(d, dtype=np.float64), np.asarray(e, dtype=np.float64)
    if d.shape != (k.shape[0],) or e.shape != (k.shape[1],):
        raise ShapeError("channel scales do not match the kernel")
    return k - eta * (d ** 2)[:, None, None, None] * g_k * (e ** 2)[None, :, None, None]


def uc_momentum_step(w, g, state, eta, mu, frame=None):
    """Heavy-ball momentum in canonical coordinates.

    The velocity is stored in original coordinates; each step maps it into
    the current canonical frame, updates it there and maps it back.
    """
    w, g = _check(w, g)
    f = matrix_frame(w) if frame is None else frame
    state = ParamState() if state is None else state
    v_orig = np.zeros_like(w) if state.velocity is None else state.velocity
    vc = mu * (v_orig / f) + f * g
    w_new = w - eta * f * vc
    return w_new, replace(state, velocity=f * vc, t=state.t + 1)


def uc_adam_step(w, g, state, config, frame=None):
    """Adam with both moments kept in canonical coordinates.

    Moments stored against an earlier frame are re-expressed in the current
    one (first moment by the frame ratio, second by its square) before the
    usual update; ``eps_adam`` is added in canonical units.
    """
    w, g = _check(w, g)
    f = matrix_frame(w) if frame is None else frame
    state = ParamState() if state is None else state
    gc = f * g
    if state.m is None:
        m = np.zeros_like(w)
        v = np.zeros_like(w)
    else:
        ratio = state.frame / f
        m = ratio * state.m
        v = ratio ** 2 * state.v
    t = state.t + 1
    b1, b2 = config.beta1, config.beta2
    m = b1 * m + (1 - b1) * gc
    v = b2 * v + (1 - b2) * gc * gc
    m_hat = m / (1 - b1 ** t)
    v_hat = v / (1 - b2 ** t)
    w_new = w - config.eta * f * m_hat / (np.sqrt(v_hat) + config.eps_adam)
    return w_new, ParamState(m=m, v=v, frame=f, t=t)


def sgd_step(w, g, eta):
    w, g = _check(w, g)
    return w - eta * g


def sgd_momentum_step(w, g, state, eta, mu):
    w, g = _check(w, g)
    state = ParamState() if state is None else state
    v = g if state.velocity is None else mu * state.velocity + g
    return w - eta * v, replace(state, velocity=v, t=state.t + 1)


# -- frames over a whole network --------------------------------------------

def _layer_scales(node):
    if isinstance(node, Dense):
        dec = rz_canonicalize(node.params["w"])
    else:
        dec = canonicalize_kernel(node.params["k"])
    return dec.d, dec.e


def reference_scale(net, name, cache=None):
    """A positive vector on edge ``name`` that transforms like the gauge ``S``.

    The canonical split ``W = D W' E`` only fixes ``D`` and ``E`` up to a
    shared scalar, so ``D`` alone is not covariant.  For a linear layer the
    scalar is pinned against the input edge: the output scale is
    ``d * gmean(e * r_in)`` where ``r_in`` is the reference of the input
    edge.  Other nodes propagate references through their channel
    bookkeeping; the input edge gets ones.
    """
    cache = {} if cache is None else cache
    if name in cache:
        return cache[name]
    node = net[name]
    if isinstance(node, Input):
        r = np.ones(net.shapes[name][0])
    elif isinstance(node, (Dense, Conv2d)):
        d, e = _layer_scales(node)
        r_in = reference_scale(net, node.inputs[0], cache)
        r = d * np.exp(np.mean(np.log(e * r_in)))
    elif isinstance(node, (Nonlin, AffineGain, Output, Add)):
        r = reference_scale(net, node.inputs[0], cache)
    elif isinstance(node, Concat):
        r = np.concatenate([reference_scale(net, s, cache) for s in node.inputs])
    elif isinstance(node, Split):
        r = reference_scale(net, node.inputs[0], cache)[node.start:node.stop]
    elif isinstance(node, Permute):
        r = reference_scale(net, node.inputs[0], cache)[node.perm]
    elif isinstance(node, Flatten):
        s = net.shapes[node.inputs[0]]
        r = np.repeat(reference_scale(net, node.inputs[0], cache), s[1] * s[2])
    else:
        raise UnsupportedStructureError(f"no scale rule for node kind {node.kind!r}")
    cache[name] = r
    return r


def param_frames(net):
    """Frame array (same shape as the parameter) for every parameter of ``net``.

    Biases and gain shifts use the covariant edge scale from
    :func:`reference_scale`; gains are gauge invariant and get ones.
    """
    frames = {}
    cache = {}
    for node in net.nodes:
        if isinstance(node, Dense):
            d, e = _layer_scales(node)
            frames[f"{node.name}.w"] = d[:, None] * e[None, :]
            if "b" in node.params:
                frames[f"{node.name}.b"] = reference_scale(net, node.name, cache)
        elif isinstance(node, Conv2d):
            d, e = _layer_scales(node)
            frames[f"{node.name}.k"] = d[:, None, None, None] * e[None, :, None, None]
            if "b" in node.params:
                frames[f"{node.name}.b"] = reference_scale(net, node.name, cache)
        elif isinstance(node, AffineGain):
            frames[f"{node.name}.a"] = np.ones_like(node.params["a"])
            frames[f"{node.name}.c"] = reference_scale(net, node.inputs[0], cache)
    return frames


class Optimizer:
    """Applies one configured update rule to every parameter of a network."""

    def __init__(self, config):
        self.config = config if isinstance(config, OptimizerConfig) else OptimizerConfig.from_dict(config)
        self.state = {}
        self._frozen = None

    def frames(self, net):
        if self.config.refresh == "frozen":
            if self._frozen is None:
                self._frozen = param_frames(net)
            return self._frozen
        return param_frames(net)

    def step(self, net, grads):
        """Update ``net`` in place from a :class:`~ucgsd.graph.GradientSet`."""
        cfg = self.config
        grads = grads.params if hasattr(grads, "params") else grads
        params = net.params()
        frames = self.frames(net) if cfg.is_uc else None
        new = {}
        for key, p in params.items():
            g = grads[key]
            st = self.state.get(key)
            if cfg.kind == "ucgsd":
                f = frames[key]
                new[key] = p - cfg.eta * f * f * g
            elif cfg.kind == "uc_momentum":
                new[key], self.state[key] = uc_momentum_step(p, g, st, cfg.eta, cfg.mu, frames[key])
            elif cfg.kind == "uc_adam":
                new[key], self.state[key] = uc_adam_step(p, g, st, cfg, frames[key])
            elif cfg.kind == "sgd":
                new[key] = sgd_step(p, g, cfg.eta)
            else:
                new[key], self.state[key] = sgd_momentum_step(p, g, st, cfg.eta, cfg.mu)
        net.set_params(new)
        if cfg.project:
            net.set_params(gauge_fix_projection(net).params())
        return net


_CHAIN = (Input, Dense, Conv2d, Nonlin, Flatten, Output)


def gauge_fix_projection(net):
    """Replace every linear layer by its canonical representative.

    Weights become ``C(W)``, kernels their channel-canonical form and biases
    are divided by the covariant output scale of :func:`reference_scale`
    (plain ``b / d`` would inherit the shared-scalar ambiguity of ``d``).  The result depends only on the gauge class of ``net``.  This
    does not preserve the network function in general.  Only plain chains
    (no add/concat/split/permute/gain nodes) are supported.
    """
    for pos, node in enumerate(net.nodes):
        if not isinstance(node, _CHAIN):
            raise UnsupportedStructureError(f"projection needs a plain chain; found {node.kind!r}")
        if pos and node.inputs != (net.nodes[pos - 1].name,):
            raise UnsupportedStructureError(f"projection needs a plain chain; {node.name!r} is not")
    cache = {}
    refs = {n.name: reference_scale(net, n.name, cache) for n in net.nodes if n.params}
    out = net.copy()
    for node in out.nodes:
        if isinstance(node, Dense):
            dec = rz_canonicalize(node.params["w"])
            node.params["w"] = dec.wp
        elif isinstance(node, Conv2d):
            dec = canonicalize_kernel(node.params["k"])
            node.params["k"] = dec.kp
        else:
            continue
        if "b" in node.params:
            node.params["b"] = node.params["b"] / refs[node.name]
    return out


# -- training loop ----------------------------------------------------------

def batch_schedule(n, batch_size, steps, seed):
    """Deterministic list of index arrays, reshuffling once per epoch."""
    if batch_size <= 0 or n <= 0:
        raise ConfigError("dataset size and batch size must be positive")
    rng = np.random.default_rng(seed)
    batch_size = min(batch_size, n)
    order = np.empty(0, dtype=np.int64)
    out = []
    for _ in range(steps):
        if order.size < batch_size:
            order = np.concatenate([order, rng.permutation(n)])
        out.append(order[:batch_size])
        order = order[batch_size:]
    return out


def train_step(net, opt, x, target):
    """One forward/backward/update; returns ``(loss, grad_norm)`` before the update."""
    loss, grads, _ = loss_and_grad(net, x, target)
    opt.step(net, grads)
    return loss, grads.norm()
