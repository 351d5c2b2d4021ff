"""Network builders and the JSON architecture / text parameter file format."""

import json
import os

import numpy as np

from .errors import ConfigError, ShapeError
from .graph import (
    Add,
    AffineGain,
    Concat,
    Conv2d,
    Dense,
    Flatten,
    Input,
    Network,
    Nonlin,
    Output,
    Permute,
    SoftmaxXentOutput,
    Split,
)
from .tensor import format_matrix, format_tensor4, parse_matrix, parse_tensor4

__all__ = [
    "he_normal",
    "mlp",
    "residual_mlp",
    "conv_net",
    "build_network",
    "network_to_dict",
    "save_network",
    "load_network",
]


def he_normal(rng, shape, fan_in):
    """Zero-mean Gaussian with variance ``2 / fan_in``."""
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def _dense(rng, name, src, n_in, n_out, bias):
    w = he_normal(rng, (n_out, n_in), n_in)
    return Dense(name, [src], w, np.zeros(n_out) if bias else None)


def _terminal(output):
    if output == "mse":
        return Output("out", ["logits"])
    if output == "softmax_xent":
        return SoftmaxXentOutput("out", ["logits"])
    raise ConfigError(f"unknown output kind {output!r}")


def mlp(sizes, seed=0, bias=False, nonlinearity="relu", slope=0.01, output="mse"):
    """Plain chain ``in -> fc1 -> act1 -> ... -> logits -> out``.

    ``sizes`` lists the widths from input to output, e.g. ``[8, 16, 16, 4]``.
    """
    if len(sizes) < 2:
        raise ConfigError("an MLP needs at least input and output sizes")
    rng = np.random.default_rng(seed)
    nodes = [Input("in", sizes[0])]
    src = "in"
    for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:]), start=1):
        last = i == len(sizes) - 1
        name = "logits" if last else f"fc{i}"
        nodes.append(_dense(rng, name, src, n_in, n_out, bias))
        src = name
        if not last:
            nodes.append(Nonlin(f"act{i}", [src], nonlinearity, slope))
            src = f"act{i}"
    nodes.append(_terminal(output))
    return Network(nodes)


def residual_mlp(n_in, width, block_widths, n_out, seed=0, bias=False,
                 nonlinearity="relu", slope=0.01, output="mse"):
    """Stem to ``width``, then blocks ``h <- act(h + fc_b(act(fc_a(h))))``."""
    rng = np.random.default_rng(seed)
    nodes = [Input("in", n_in), _dense(rng, "stem", "in", n_in, width, bias),
             Nonlin("stem_act", ["stem"], nonlinearity, slope)]
    src = "stem_act"
    for i, inner in enumerate(block_widths, start=1):
        p = f"blk{i}"
        nodes += [
            _dense(rng, f"{p}.fc_a", src, width, inner, bias),
            Nonlin(f"{p}.act_a", [f"{p}.fc_a"], nonlinearity, slope),
            _dense(rng, f"{p}.fc_b", f"{p}.act_a", inner, width, bias),
            Add(f"{p}.add", [src, f"{p}.fc_b"]),
            Nonlin(f"{p}.act", [f"{p}.add"], nonlinearity, slope),
        ]
        src = f"{p}.act"
    nodes.append(_dense(rng, "logits", src, width, n_out, bias))
    nodes.append(_terminal(output))
    return Network(nodes)


def conv_net(image, channels, kernel, hidden, n_out, seed=0, bias=False,
             stride=1, padding=0, nonlinearity="relu", slope=0.01, output="mse"):
    """One conv layer stem followed by an MLP head."""
    image = tuple(image)
    if len(image) != 3:
        raise ConfigError("image shape must be (channels, height, width)")
    rng = np.random.default_rng(seed)
    fan_in = image[0] * kernel * kernel
    k = he_normal(rng, (channels, image[0], kernel, kernel), fan_in)
    conv = Conv2d("conv", ["in"], k, np.zeros(channels) if bias else None, stride, padding)
    nodes = [Input("in", image), conv, Nonlin("conv_act", ["conv"], nonlinearity, slope),
             Flatten("flat", ["conv_act"])]
    probe = Network(nodes + [Output("out", ["flat"])])
    width = probe.shapes["flat"][0]
    src = "flat"
    for i, n_hidden in enumerate(hidden, start=1):
        nodes.append(_dense(rng, f"fc{i}", src, width, n_hidden, bias))
        nodes.append(Nonlin(f"act{i}", [f"fc{i}"], nonlinearity, slope))
        src, width = f"act{i}", n_hidden
    nodes.append(_dense(rng, "logits", src, width, n_out, bias))
    nodes.append(_terminal(output))
    return Network(nodes)


_ARCH_KEYS = {"input", "hidden", "output", "nonlinearity", "slope", "bias", "residual", "conv_stem"}
_STEM_KEYS = {"channels", "kernel", "stride", "padding"}


def build_network(arch, seed=0, output="mse"):
    """Build a network from an experiment-config architecture block.

    ``arch`` keys: ``input`` (int or ``[C, H, W]``), ``hidden`` (list),
    ``output`` (int), and optionally ``nonlinearity``, ``slope``, ``bias``,
    ``residual`` and ``conv_stem`` (``channels``, ``kernel``, ``stride``,
    ``padding``).  With ``residual`` the first hidden width is the trunk and
    each later entry is the inner width of one residual block.
    """
    unknown = set(arch) - _ARCH_KEYS
    if unknown:
        raise ConfigError(f"unknown architecture keys: {sorted(unknown)}")
    try:
        n_in, hidden, n_out = arch["input"], list(arch["hidden"]), int(arch["output"])
    except KeyError as exc:
        raise ConfigError(f"architecture is missing {exc}") from None
    kw = dict(seed=seed, bias=bool(arch.get("bias", False)),
              nonlinearity=arch.get("nonlinearity", "relu"),
              slope=float(arch.get("slope", 0.01)), output=output)
    stem = arch.get("conv_stem")
    if stem is not None:
        if set(stem) - _STEM_KEYS:
            raise ConfigError(f"unknown conv_stem keys: {sorted(set(stem) - _STEM_KEYS)}")
        if arch.get("residual"):
            raise ConfigError("residual blocks are not combined with a conv stem")
        return conv_net(n_in, int(stem["channels"]), int(stem["kernel"]), hidden, n_out,
                        stride=int(stem.get("stride", 1)), padding=int(stem.get("padding", 0)), **kw)
    if not isinstance(n_in, int):
        raise ConfigError("image-shaped input requires a conv_stem")
    if arch.get("residual"):
        if not hidden:
            raise ConfigError("a residual network needs a trunk width")
        return residual_mlp(n_in, hidden[0], hidden[1:], n_out, **kw)
    return mlp([n_in] + hidden + [n_out], **kw)


# -- architecture files -----------------------------------------------------

_KINDS = {cls.kind: cls for cls in (Input, Dense, Conv2d, Nonlin, Add, Concat, Split, Permute,
                                    Flatten, AffineGain, Output, SoftmaxXentOutput)}


def _param_file(node, pname):
    return f"{node}.{pname}.txt"


def network_to_dict(net):
    return {
        "nodes": [
            {
                "name": n.name,
                "kind": n.kind,
                "inputs": list(n.inputs),
                "shape": list(net.shapes[n.name]),
                "attrs": n.attrs(),
                "params": {k: _param_file(n.name, k) for k in n.params},
            }
            for n in net.nodes
        ]
    }


def save_network(net, directory):
    """Write ``network.json`` plus one text file per parameter into ``directory``."""
    os.makedirs(directory, exist_ok=True)
    desc = network_to_dict(net)
    with open(os.path.join(directory, "network.json"), "w") as fh:
        json.dump(desc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    for n in net.nodes:
        for k, v in n.params.items():
            text = format_tensor4(v) if v.ndim == 4 else format_matrix(v.reshape(v.shape[0], -1))
            with open(os.path.join(directory, _param_file(n.name, k)), "w") as fh:
                fh.write(text)
    return os.path.join(directory, "network.json")


def _load_param(path, ndim):
    with open(path) as fh:
        text = fh.read()
    if ndim == 4:
        return parse_tensor4(text)
    a = parse_matrix(text)
    return a.reshape(-1) if ndim == 1 else a


def load_network(path):
    """Inverse of :func:`save_network`; ``path`` is the ``network.json`` file."""
    base = os.path.dirname(os.path.abspath(path))
    with open(path) as fh:
        desc = json.load(fh)
    nodes = []
    for entry in desc["nodes"]:
        kind = entry["kind"]
        if kind not in _KINDS:
            raise ShapeError(f"unknown node kind {kind!r}")
        name, inputs, attrs = entry["name"], entry.get("inputs", []), dict(entry.get("attrs", {}))
        files = entry.get("params", {})
        p = {}
        for pname, fname in files.items():
            ndim = 4 if (kind == "conv2d" and pname == "k") else (2 if pname == "w" else 1)
            p[pname] = _load_param(os.path.join(base, fname), ndim)
        if kind == "input":
            nodes.append(Input(name, attrs["shape"]))
        elif kind == "dense":
            nodes.append(Dense(name, inputs, p["w"], p.get("b")))
        elif kind == "conv2d":
            nodes.append(Conv2d(name, inputs, p["k"], p.get("b"), **attrs))
        elif kind == "nonlin":
            nodes.append(Nonlin(name, inputs, **attrs))
        elif kind == "split":
            nodes.append(Split(name, inputs, **attrs))
        elif kind == "permute":
            nodes.append(Permute(name, inputs, **attrs))
        elif kind == "affine_gain":
            nodes.append(AffineGain(name, inputs, p["a"], p["c"]))
        else:
            nodes.append(_KINDS[kind](name, inputs))
    return Network(nodes)
