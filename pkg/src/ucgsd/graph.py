"""Network DAG, forward evaluation and reverse-mode differentiation.

Tensors carry the batch on the *last* axis: dense features are ``(n, B)``
and images are ``(C, H, W, B)``.  Axis 0 is always the channel/feature axis,
which is the axis the diagonal gauge acts on.
"""

import copy
from dataclasses import dataclass, field

import numpy as np

from .canon import canonicalize_kernel, rz_canonicalize
from .errors import NumericError, ShapeError, UnsupportedStructureError

__all__ = [
    "Node",
    "Input",
    "Dense",
    "Conv2d",
    "Nonlin",
    "Add",
    "Concat",
    "Split",
    "Permute",
    "Flatten",
    "AffineGain",
    "Output",
    "SoftmaxXentOutput",
    "Network",
    "Activations",
    "GradientSet",
    "FiniteDiffResult",
    "forward",
    "backward_euclidean",
    "backward_uc",
    "loss_mse",
    "loss_softmax_xent",
    "loss_and_grad",
    "network_loss",
    "finite_diff_grad",
    "max_relative_error",
]

HOMOGENEOUS = ("relu", "leaky_relu", "abs")
NON_HOMOGENEOUS = ("softmax", "sigmoid", "tanh", "batchnorm", "layernorm")


def _chan(v, ndim):
    """Reshape a per-channel vector to broadcast along axis 0 of an ndim tensor."""
    return v.reshape((-1,) + (1,) * (ndim - 1))


class Node:
    kind = "node"
    param_names = ()

    def __init__(self, name, inputs=()):
        self.name = name
        self.inputs = tuple(inputs)
        self.params = {}

    def out_shape(self, in_shapes):
        return in_shapes[0]

    def forward(self, xs):
        raise NotImplementedError

    def backward(self, xs, y, gy):
        """Return ``(input_grads, param_grads)``."""
        raise NotImplementedError

    def backward_uc(self, xs, y, gy):
        return self.backward(xs, y, gy)[0]

    def attrs(self):
        return {}

    def __repr__(self):
        return f"{type(self).__name__}({self.name!r}, inputs={list(self.inputs)})"


class Input(Node):
    kind = "input"

    def __init__(self, name, shape):
        super().__init__(name)
        self.shape = (shape,) if np.isscalar(shape) else tuple(int(s) for s in shape)

    def out_shape(self, in_shapes):
        return self.shape

    def attrs(self):
        return {"shape": list(self.shape)}


class Dense(Node):
    kind = "dense"
    param_names = ("w", "b")

    def __init__(self, name, inputs, w, b=None):
        super().__init__(name, inputs)
        self.params["w"] = np.array(w, dtype=np.float64)
        if self.params["w"].ndim != 2:
            raise ShapeError(f"{name}: weight must be 2-D")
        if b is not None:
            self.params["b"] = np.array(b, dtype=np.float64).reshape(-1)
            if self.params["b"].shape[0] != self.params["w"].shape[0]:
                raise ShapeError(f"{name}: bias length does not match weight rows")

    def out_shape(self, in_shapes):
        (s,) = in_shapes
        w = self.params["w"]
        if len(s) != 1 or s[0] != w.shape[1]:
            raise ShapeError(f"{self.name}: input shape {s} does not fit weight {w.shape}")
        return (w.shape[0],)

    def _affine(self, w, x):
        y = w @ x
        if "b" in self.params:
            y = y + self.params["b"][:, None]
        return y

    def forward(self, xs):
        return self._affine(self.params["w"], xs[0])

    def backward(self, xs, y, gy):
        (x,) = xs
        w = self.params["w"]
        grads = {"w": gy @ x.T}
        if "b" in self.params:
            grads["b"] = gy.sum(axis=1)
        return [w.T @ gy], grads

    def backward_uc(self, xs, y, gy):
        return [rz_canonicalize(self.params["w"]).wp.T @ gy]


def _conv_out(n, k, stride, padding):
    return (n + 2 * padding - k) // stride + 1


class Conv2d(Node):
    """2-D cross-correlation over ``(C, H, W, B)`` tensors."""

    kind = "conv2d"
    param_names = ("k", "b")

    def __init__(self, name, inputs, k, b=None, stride=1, padding=0):
        super().__init__(name, inputs)
        self.params["k"] = np.array(k, dtype=np.float64)
        if self.params["k"].ndim != 4:
            raise ShapeError(f"{name}: kernel must be (c_out, c_in, kh, kw)")
        if b is not None:
            self.params["b"] = np.array(b, dtype=np.float64).reshape(-1)
            if self.params["b"].shape[0] != self.params["k"].shape[0]:
                raise ShapeError(f"{name}: bias length does not match output channels")
        self.stride = int(stride)
        self.padding = int(padding)

    def attrs(self):
        return {"stride": self.stride, "padding": self.padding}

    def out_shape(self, in_shapes):
        (s,) = in_shapes
        co, ci, kh, kw = self.params["k"].shape
        if len(s) != 3 or s[0] != ci:
            raise ShapeError(f"{self.name}: input shape {s} does not fit kernel {self.params['k'].shape}")
        oh = _conv_out(s[1], kh, self.stride, self.padding)
        ow = _conv_out(s[2], kw, self.stride, self.padding)
        if oh <= 0 or ow <= 0:
            raise ShapeError(f"{self.name}: kernel larger than padded input")
        return (co, oh, ow)

    def _pad(self, x):
        p = self.padding
        if p == 0:
            return x
        return np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))

    def _windows(self, xp, oh, ow):
        s = self.stride
        _, _, kh, kw = self.params["k"].shape
        for u in range(kh):
            for v in range(kw):
                yield u, v, (slice(None), slice(u, u + s * (oh - 1) + 1, s), slice(v, v + s * (ow - 1) + 1, s))

    def _correlate(self, k, x):
        xp = self._pad(x)
        oh = _conv_out(x.shape[1], k.shape[2], self.stride, self.padding)
        ow = _conv_out(x.shape[2], k.shape[3], self.stride, self.padding)
        y = np.zeros((k.shape[0], oh, ow, x.shape[3]))
        for u, v, win in self._windows(xp, oh, ow):
            y += np.einsum("ij,jhwb->ihwb", k[:, :, u, v], xp[win])
        return y

    def _input_grad(self, k, x, gy):
        xp_shape = self._pad(x).shape
        gxp = np.zeros(xp_shape)
        oh, ow = gy.shape[1], gy.shape[2]
        for u, v, win in self._windows(gxp, oh, ow):
            gxp[win] += np.einsum("ij,ihwb->jhwb", k[:, :, u, v], gy)
        p = self.padding
        if p:
            gxp = gxp[:, p:-p, p:-p, :]
        return gxp

    def forward(self, xs):
        y = self._correlate(self.params["k"], xs[0])
        if "b" in self.params:
            y = y + self.params["b"][:, None, None, None]
        return y

    def backward(self, xs, y, gy):
        (x,) = xs
        k = self.params["k"]
        xp = self._pad(x)
        gk = np.zeros_like(k)
        for u, v, win in self._windows(xp, gy.shape[1], gy.shape[2]):
            gk[:, :, u, v] = np.einsum("ihwb,jhwb->ij", gy, xp[win])
        grads = {"k": gk}
        if "b" in self.params:
            grads["b"] = gy.sum(axis=(1, 2, 3))
        return [self._input_grad(k, x, gy)], grads

    def backward_uc(self, xs, y, gy):
        kp = canonicalize_kernel(self.params["k"]).kp
        return [self._input_grad(kp, xs[0], gy)]


class Nonlin(Node):
    """Elementwise degree-1 positively homogeneous activation."""

    kind = "nonlin"

    def __init__(self, name, inputs, fn="relu", slope=0.01):
        super().__init__(name, inputs)
        if fn in NON_HOMOGENEOUS:
            raise UnsupportedStructureError(
                f"{name}: {fn} is not positively homogeneous; only allowed as the terminal node"
            )
        if fn not in HOMOGENEOUS:
            raise ShapeError(f"{name}: unknown nonlinearity {fn!r}")
        self.fn = fn
        self.slope = float(slope)

    def attrs(self):
        a = {"fn": self.fn}
        if self.fn == "leaky_relu":
            a["slope"] = self.slope
        return a

    def derivative(self, z):
        # derivative at exactly 0 is 0 for relu and abs
        if self.fn == "relu":
            return (z > 0).astype(np.float64)
        if self.fn == "leaky_relu":
            return np.where(z > 0, 1.0, self.slope)
        return np.sign(z)

    def forward(self, xs):
        (z,) = xs
        if self.fn == "relu":
            return np.maximum(z, 0.0)
        if self.fn == "leaky_relu":
            return np.where(z > 0, z, self.slope * z)
        return np.abs(z)

    def backward(self, xs, y, gy):
        return [self.derivative(xs[0]) * gy], {}


class Add(Node):
    kind = "add"

    def out_shape(self, in_shapes):
        if len(in_shapes) != 2 or in_shapes[0] != in_shapes[1]:
            raise ShapeError(f"{self.name}: add needs two equal shapes, got {in_shapes}")
        return in_shapes[0]

    def forward(self, xs):
        return xs[0] + xs[1]

    def backward(self, xs, y, gy):
        return [gy, gy], {}


class Concat(Node):
    """Concatenate along the channel axis."""

    kind = "concat"

    def out_shape(self, in_shapes):
        rest = {tuple(s[1:]) for s in in_shapes}
        if len(in_shapes) < 1 or len(rest) != 1:
            raise ShapeError(f"{self.name}: parts differ beyond the channel axis: {in_shapes}")
        return (sum(s[0] for s in in_shapes),) + in_shapes[0][1:]

    def forward(self, xs):
        return np.concatenate(xs, axis=0)

    def backward(self, xs, y, gy):
        cuts = np.cumsum([x.shape[0] for x in xs])[:-1]
        return list(np.split(gy, cuts, axis=0)), {}


class Split(Node):
    """Take channels ``start:stop`` of the input (one part of a split)."""

    kind = "split"

    def __init__(self, name, inputs, start, stop):
        super().__init__(name, inputs)
        self.start, self.stop = int(start), int(stop)

    def attrs(self):
        return {"start": self.start, "stop": self.stop}

    def out_shape(self, in_shapes):
        (s,) = in_shapes
        if not 0 <= self.start < self.stop <= s[0]:
            raise ShapeError(f"{self.name}: range {self.start}:{self.stop} outside {s[0]} channels")
        return (self.stop - self.start,) + s[1:]

    def forward(self, xs):
        return xs[0][self.start:self.stop].copy()

    def backward(self, xs, y, gy):
        gx = np.zeros_like(xs[0])
        gx[self.start:self.stop] = gy
        return [gx], {}


class Permute(Node):
    """``y[i] = x[perm[i]]`` along the channel axis."""

    kind = "permute"

    def __init__(self, name, inputs, perm):
        super().__init__(name, inputs)
        self.perm = np.asarray(perm, dtype=np.int64)

    def attrs(self):
        return {"perm": self.perm.tolist()}

    def out_shape(self, in_shapes):
        (s,) = in_shapes
        if sorted(self.perm.tolist()) != list(range(s[0])):
            raise ShapeError(f"{self.name}: {self.perm.tolist()} is not a permutation of {s[0]} channels")
        return s

    def forward(self, xs):
        return xs[0][self.perm]

    def backward(self, xs, y, gy):
        gx = np.empty_like(gy)
        gx[self.perm] = gy
        return [gx], {}


class Flatten(Node):
    """``(C, H, W, B) -> (C*H*W, B)``, channel-major."""

    kind = "flatten"

    def out_shape(self, in_shapes):
        (s,) = in_shapes
        return (int(np.prod(s)),)

    def forward(self, xs):
        x = xs[0]
        return x.reshape(-1, x.shape[-1])

    def backward(self, xs, y, gy):
        return [gy.reshape(xs[0].shape)], {}


class AffineGain(Node):
    """``y = a * x + c`` with per-channel gain ``a`` and shift ``c``."""

    kind = "affine_gain"
    param_names = ("a", "c")

    def __init__(self, name, inputs, a, c):
        super().__init__(name, inputs)
        self.params["a"] = np.array(a, dtype=np.float64).reshape(-1)
        self.params["c"] = np.array(c, dtype=np.float64).reshape(-1)

    def out_shape(self, in_shapes):
        (s,) = in_shapes
        if self.params["a"].shape[0] != s[0] or self.params["c"].shape[0] != s[0]:
            raise ShapeError(f"{self.name}: gain/shift length does not match {s[0]} channels")
        return s

    def forward(self, xs):
        x = xs[0]
        return _chan(self.params["a"], x.ndim) * x + _chan(self.params["c"], x.ndim)

    def backward(self, xs, y, gy):
        x = xs[0]
        axes = tuple(range(1, x.ndim))
        grads = {"a": (gy * x).sum(axis=axes), "c": gy.sum(axis=axes)}
        return [_chan(self.params["a"], x.ndim) * gy], grads


class Output(Node):
    """Terminal node; the loss is half the summed squared error."""

    kind = "output"
    loss = "mse"

    def forward(self, xs):
        return xs[0]

    def backward(self, xs, y, gy):
        return [gy], {}


class SoftmaxXentOutput(Output):
    """Terminal node holding logits; the loss is softmax cross-entropy."""

    kind = "softmax_xent_output"
    loss = "softmax_xent"


TERMINALS = (Output,)


class Network:
    """Topologically ordered DAG of nodes with a single input and terminal."""

    def __init__(self, nodes):
        self.nodes = list(nodes)
        self._index = {}
        self.shapes = {}
        for pos, node in enumerate(self.nodes):
            if node.name in self._index:
                raise ShapeError(f"duplicate node name {node.name!r}")
            for src in node.inputs:
                if src not in self._index:
                    raise ShapeError(f"{node.name}: input {src!r} is not an earlier node")
            if isinstance(node, Input) != (pos == 0):
                raise ShapeError("the first node, and only the first node, must be an Input")
            if isinstance(node, TERMINALS) != (pos == len(self.nodes) - 1):
                raise UnsupportedStructureError(
                    "the last node, and only the last node, must be Output or SoftmaxXentOutput"
                )
            if isinstance(node, TERMINALS) and len(self.shapes[node.inputs[0]]) != 1:
                raise ShapeError("the terminal node needs a flat feature input")
            self.shapes[node.name] = node.out_shape([self.shapes[s] for s in node.inputs])
            self._index[node.name] = pos

    def __getitem__(self, name):
        return self.nodes[self._index[name]]

    def __iter__(self):
        return iter(self.nodes)

    def __len__(self):
        return len(self.nodes)

    @property
    def input(self):
        return self.nodes[0]

    @property
    def terminal(self):
        return self.nodes[-1]

    def consumers(self, name):
        return [n for n in self.nodes if name in n.inputs]

    def params(self):
        """Flat ``{"node.param": array}`` view (arrays are the live ones)."""
        return {f"{n.name}.{k}": v for n in self.nodes for k, v in n.params.items()}

    def set_params(self, values):
        for key, val in values.items():
            node, pname = key.rsplit(".", 1)
            cur = self[node].params[pname]
            val = np.asarray(val, dtype=np.float64)
            if val.shape != cur.shape:
                raise ShapeError(f"{key}: shape {val.shape} != {cur.shape}")
            self[node].params[pname] = val

    def copy(self):
        return copy.deepcopy(self)


@dataclass
class Activations:
    values: dict

    @property
    def output(self):
        return next(reversed(self.values.values()))

    def __getitem__(self, name):
        return self.values[name]


@dataclass
class GradientSet:
    params: dict
    input: np.ndarray = None

    def __getitem__(self, key):
        return self.params[key]

    def norm(self):
        return float(np.sqrt(sum(float(np.sum(g * g)) for g in self.params.values())))


def _batched(net, x):
    x = np.asarray(x, dtype=np.float64)
    shape = net.input.shape
    if x.shape == shape:
        x = x[..., None]
    if x.shape[:-1] != shape:
        raise ShapeError(f"input shape {x.shape} does not match {shape} (+ batch)")
    return x


def forward(net, x):
    """Evaluate ``net`` on ``x`` (batch last) and keep every node output."""
    values = {net.input.name: _batched(net, x)}
    if not np.all(np.isfinite(values[net.input.name])):
        raise NumericError("non-finite network input")
    for node in net.nodes[1:]:
        y = node.forward([values[s] for s in node.inputs])
        if not np.all(np.isfinite(y)):
            raise NumericError(f"non-finite value produced at node {node.name!r}")
        values[node.name] = y
    return Activations(values)


def _reverse(net, acts, upstream, uc):
    grads_out = {net.terminal.name: np.asarray(upstream, dtype=np.float64)}
    param_grads = {}
    signals = {}
    for node in reversed(net.nodes[1:]):
        gy = grads_out.pop(node.name, None)
        if gy is None:
            gy = np.zeros_like(acts[node.name])
        signals[node.name] = gy
        xs = [acts[s] for s in node.inputs]
        if uc:
            gxs = node.backward_uc(xs, acts[node.name], gy)
        else:
            gxs, pg = node.backward(xs, acts[node.name], gy)
            for k, g in pg.items():
                param_grads[f"{node.name}.{k}"] = g
        for src, gx in zip(node.inputs, gxs):
            grads_out[src] = grads_out[src] + gx if src in grads_out else gx
    g_in = grads_out.pop(net.input.name, np.zeros_like(acts[net.input.name]))
    signals[net.input.name] = g_in
    return g_in, param_grads, signals


def backward_euclidean(net, acts, upstream):
    """Reverse-mode gradients of the loss w.r.t. every parameter and the input.

    ``upstream`` is the loss gradient at the terminal node.  Gradients are
    summed over the batch.
    """
    g_in, param_grads, _ = _reverse(net, acts, upstream, uc=False)
    for key, p in net.params().items():
        if param_grads[key].shape != p.shape:
            raise ShapeError(f"gradient for {key} has shape {param_grads[key].shape}")
    return GradientSet(param_grads, g_in)


def backward_uc(net, acts, upstream):
    """Error signals propagated with the UC adjoint through linear nodes.

    Dense nodes send ``C(W).T @ g_y`` backwards and conv nodes use the
    canonical kernel; every other node propagates as usual.  Returns a dict
    mapping each node name to the signal at that node's output.
    """
    return _reverse(net, acts, upstream, uc=True)[2]


def loss_mse(pred, target):
    """Half the summed squared error and its gradient w.r.t. ``pred``."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.size == 0:
        raise ShapeError("empty prediction")
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} vs target {target.shape}")
    diff = pred - target
    return 0.5 * float(np.sum(diff * diff)), diff


def loss_softmax_xent(logits, labels):
    """Summed softmax cross-entropy; ``logits`` is ``(k, B)``, ``labels`` ``(B,)``."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim == 1:
        logits = logits[:, None]
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if logits.size == 0:
        raise ShapeError("empty logits")
    if labels.shape != (logits.shape[1],):
        raise ShapeError(f"{labels.shape[0]} labels for a batch of {logits.shape[1]}")
    z = logits - logits.max(axis=0, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=0, keepdims=True))
    cols = np.arange(labels.shape[0])
    value = -float(logp[labels, cols].sum())
    grad = np.exp(logp)
    grad[labels, cols] -= 1.0
    return value, grad


def network_loss(net, acts, target):
    if net.terminal.loss == "softmax_xent":
        return loss_softmax_xent(acts.output, target)
    t = np.asarray(target, dtype=np.float64)
    if t.ndim == 1:
        t = t[:, None]
    return loss_mse(acts.output, t)


def loss_and_grad(net, x, target):
    """Return ``(loss, GradientSet, Activations)`` for one batch."""
    acts = forward(net, x)
    value, g = network_loss(net, acts, target)
    return value, backward_euclidean(net, acts, g), acts


@dataclass
class FiniteDiffResult:
    grads: GradientSet
    flagged: bool
    kink_distance: float = field(default=float("inf"))


def kink_distance(net, acts):
    """Smallest |pre-activation| over all nonlinearity nodes (inf if none)."""
    dists = [np.abs(acts[n.inputs[0]]).min() for n in net.nodes if isinstance(n, Nonlin)]
    return float(min(dists)) if dists else float("inf")


def finite_diff_grad(net, x, target, h=1e-5):
    """Central-difference gradient of the loss for every scalar parameter.

    The evaluation point is flagged as unreliable when any nonlinearity
    pre-activation lies within ``10 * h`` of the kink at zero.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    work = net.copy()
    base = forward(work, x)
    dist = kink_distance(work, base)
    grads = {}
    for key, p in work.params().items():
        g = np.zeros_like(p)
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = network_loss(work, forward(work, x), target)[0]
            flat[i] = orig - h
            fm = network_loss(work, forward(work, x), target)[0]
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * h)
        grads[key] = g
    return FiniteDiffResult(GradientSet(grads), dist < 10 * h, dist)


def max_relative_error(a, b, floor=1e-12):
    """Largest per-parameter ``||a - b|| / max(||a||, ||b||, floor)``."""
    a = a.params if isinstance(a, GradientSet) else a
    b = b.params if isinstance(b, GradientSet) else b
    worst = 0.0
    for key in a:
        num = np.linalg.norm(a[key] - b[key])
        den = max(np.linalg.norm(a[key]), np.linalg.norm(b[key]), floor)
        worst = max(worst, float(num / den))
    return worst
