import numpy as np
import pytest

from ucgsd.canon import canonical_project, uc_adjoint
from ucgsd.errors import NumericError, ShapeError, UnsupportedStructureError
from ucgsd.gauge import apply_gauge, sample_gauge, solve_gauge_constraints
from ucgsd.graph import (
    Conv2d,
    Dense,
    Input,
    Network,
    Nonlin,
    Output,
    SoftmaxXentOutput,
    backward_euclidean,
    backward_uc,
    finite_diff_grad,
    forward,
    loss_and_grad,
    loss_mse,
    loss_softmax_xent,
    max_relative_error,
)
from ucgsd.models import conv_net, mlp, residual_mlp

from conftest import kitchen_sink, random_dense, rel_fro


def chain(*weights, act="relu", output=Output):
    nodes = [Input("in", np.shape(weights[0])[1])]
    src = "in"
    for i, w in enumerate(weights):
        nodes.append(Dense(f"fc{i}", [src], w))
        src = f"fc{i}"
        if i < len(weights) - 1 and act:
            nodes.append(Nonlin(f"act{i}", [src], act))
            src = f"act{i}"
    nodes.append(output("out", [src]))
    return Network(nodes)


def test_forward_identity_relu():
    net = Network([Input("in", 2), Dense("fc", ["in"], np.eye(2)),
                   Nonlin("act", ["fc"]), Output("out", ["act"])])
    np.testing.assert_array_equal(forward(net, [1.0, -1.0]).output[:, 0], [1.0, 0.0])


def test_forward_two_identity_layers():
    net = chain(np.eye(1), np.eye(1))
    assert forward(net, [2.0]).output[0, 0] == 2.0


def test_forward_shape_error():
    with pytest.raises(ShapeError):
        forward(chain(np.eye(2)), np.ones((3, 4)))


def test_forward_nan_raises():
    net = chain(np.eye(2))
    with pytest.raises(NumericError):
        forward(net, [np.inf, 1.0])


def test_non_homogeneous_nonlin_rejected():
    with pytest.raises(UnsupportedStructureError):
        Nonlin("bad", ["in"], "tanh")


def test_terminal_must_be_last():
    with pytest.raises(UnsupportedStructureError):
        Network([Input("in", 2), Output("o1", ["in"]), Dense("fc", ["o1"], np.eye(2)), Output("o2", ["fc"])])


def test_nonlin_homogeneity(rng):
    z = rng.normal(size=(5, 7))
    for fn in ("relu", "leaky_relu", "abs"):
        node = Nonlin("a", ["x"], fn, slope=0.2)
        for s in (0.5, 3.0, 1e3):
            np.testing.assert_allclose(node.forward([s * z]), s * node.forward([z]), rtol=1e-15)


def test_conv_forward_matches_naive_loop(rng):
    k = rng.normal(size=(3, 2, 3, 2))
    x = rng.normal(size=(2, 6, 5, 2))
    for stride, padding in [(1, 0), (2, 1), (1, 2)]:
        node = Conv2d("c", ["in"], k, rng.normal(size=3), stride, padding)
        y = node.forward([x])
        xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
        oh = (6 + 2 * padding - 3) // stride + 1
        ow = (5 + 2 * padding - 2) // stride + 1
        ref = np.zeros((3, oh, ow, 2))
        for b in range(2):
            for i in range(3):
                for h in range(oh):
                    for w in range(ow):
                        patch = xp[:, h * stride:h * stride + 3, w * stride:w * stride + 2, b]
                        ref[i, h, w, b] = np.sum(k[i] * patch) + node.params["b"][i]
        np.testing.assert_allclose(y, ref, rtol=1e-12, atol=1e-12)


def test_dense_gradient_by_hand():
    w = np.array([[1.0, 2.0], [3.0, 4.0]])
    net = chain(w)
    loss, grads, _ = loss_and_grad(net, [1.0, 1.0], [0.0, 0.0])
    assert loss == 0.5 * (9 + 49)
    np.testing.assert_array_equal(grads["fc0.w"], [[3.0, 3.0], [7.0, 7.0]])
    np.testing.assert_array_equal(grads.input[:, 0], w.T @ [3.0, 7.0])


def test_relu_all_negative_blocks_gradient():
    net = chain(-np.eye(2), np.eye(2))
    _, grads, _ = loss_and_grad(net, [1.0, 2.0], [5.0, 5.0])
    np.testing.assert_array_equal(grads["fc0.w"], 0.0)
    np.testing.assert_array_equal(grads.input, 0.0)


NETS = {
    "mlp": lambda: mlp([5, 7, 6, 3], seed=1, bias=True),
    "conv": lambda: conv_net((2, 5, 4), 3, 3, [5], 2, seed=2, bias=True, stride=1, padding=1),
    "conv_strided": lambda: conv_net((1, 6, 6), 2, 2, [], 3, seed=3, stride=2),
    "residual": lambda: residual_mlp(4, 5, [3, 4], 2, seed=4, bias=True),
    "kitchen_sink": lambda: kitchen_sink(5),
    "leaky": lambda: mlp([3, 4, 2], seed=6, nonlinearity="leaky_relu", slope=0.3),
}


@pytest.mark.parametrize("name", sorted(NETS))
def test_backprop_matches_finite_differences(name, rng):
    net = NETS[name]()
    x = rng.normal(size=net.input.shape + (3,))
    t = rng.normal(size=net.shapes["logits"] + (3,))
    _, grads, _ = loss_and_grad(net, x, t)
    fd = finite_diff_grad(net, x, t, h=1e-5)
    assert not fd.flagged
    assert max_relative_error(grads, fd.grads) <= 1e-5


def test_softmax_terminal_gradients(rng):
    net = mlp([3, 5, 4], seed=7, output="softmax_xent")
    assert isinstance(net.terminal, SoftmaxXentOutput)
    x = rng.normal(size=(3, 6))
    labels = rng.integers(0, 4, size=6)
    _, grads, _ = loss_and_grad(net, x, labels)
    fd = finite_diff_grad(net, x, labels)
    assert max_relative_error(grads, fd.grads) <= 1e-5


def test_loss_values():
    y = np.array([[1.0], [2.0]])
    value, grad = loss_mse(y, y)
    assert value == 0 and np.all(grad == 0)
    value, _ = loss_softmax_xent([0.0, 0.0], [0])
    assert value == pytest.approx(np.log(2.0), rel=1e-15)
    with pytest.raises(ShapeError):
        loss_mse(np.zeros((0, 1)), np.zeros((0, 1)))


def _central(f, x, h=1e-6):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def test_loss_gradients_vs_central_differences(rng):
    pred, target = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    _, g = loss_mse(pred, target)
    assert rel_fro(g, _central(lambda p: loss_mse(p, target)[0], pred)) <= 1e-6
    logits, labels = rng.normal(size=(5, 4)), rng.integers(0, 5, size=4)
    _, g = loss_softmax_xent(logits, labels)
    assert rel_fro(g, _central(lambda z: loss_softmax_xent(z, labels)[0], logits)) <= 1e-6


def test_finite_diff_linear_net(rng):
    net = chain(rng.normal(size=(3, 4)), rng.normal(size=(2, 3)), act=None)
    x, t = rng.normal(size=(4, 5)), rng.normal(size=(2, 5))
    _, grads, _ = loss_and_grad(net, x, t)
    fd = finite_diff_grad(net, x, t, h=1e-5)
    assert not fd.flagged
    assert max_relative_error(grads, fd.grads) <= 1e-8


def test_finite_diff_exact_on_quadratic():
    net = chain(np.array([[1.5]]), act=None)
    fd = finite_diff_grad(net, [2.0], [1.0], h=0.5)
    # L(w) = 0.5 (2w - 1)^2, dL/dw = 2 (2w - 1) = 4 at w = 1.5
    assert fd.grads["fc0.w"][0, 0] == pytest.approx(4.0, rel=1e-14)


def test_finite_diff_flags_kinks():
    net = chain(np.eye(2), np.eye(2))
    fd = finite_diff_grad(net, [1e-5, 1.0], [0.0, 0.0], h=1e-5)
    assert fd.flagged
    fd = finite_diff_grad(net, [0.5, 1.0], [0.0, 0.0], h=1e-5)
    assert not fd.flagged


def test_backward_uc_equals_euclidean_on_canonical(rng):
    w1 = canonical_project(random_dense(rng, 4, 3))
    w2 = canonical_project(random_dense(rng, 2, 4))
    net = chain(w1, w2)
    x, t = rng.normal(size=(3, 2)), rng.normal(size=(2, 2))
    acts = forward(net, x)
    g = acts.output - t
    uc = backward_uc(net, acts, g)
    eu = backward_euclidean(net, acts, g)
    assert rel_fro(uc["in"], eu.input) <= 1e-12


def test_backward_uc_single_dense(rng):
    w = random_dense(rng, 3, 5)
    net = chain(w)
    acts = forward(net, rng.normal(size=5))
    gy = rng.normal(size=(3, 1))
    sig = backward_uc(net, acts, gy)
    np.testing.assert_allclose(sig["in"], uc_adjoint(w) @ gy, rtol=1e-14)
    np.testing.assert_array_equal(sig["fc0"], gy)


def test_backward_uc_gauge_invariant(rng):
    w = random_dense(rng, 3, 4)
    gy = rng.normal(size=(3, 1))
    for _ in range(10):
        d, e = np.exp(rng.uniform(-3, 3, 3)), np.exp(rng.uniform(-3, 3, 4))
        net_a, net_b = chain(w), chain(d[:, None] * w * e[None, :])
        x = rng.normal(size=4)
        ga = backward_uc(net_a, forward(net_a, x), gy)["in"]
        gb = backward_uc(net_b, forward(net_b, x / e), gy)["in"]
        assert rel_fro(gb, ga) <= 1e-9


@pytest.mark.parametrize("name", ["mlp", "residual", "kitchen_sink", "conv"])
def test_forward_gauge_invariance(name, rng):
    net = NETS[name]()
    classes = solve_gauge_constraints(net)
    x = rng.normal(size=net.input.shape + (16,))
    ref = forward(net, x).output
    for seed in range(5):
        out = forward(apply_gauge(net, sample_gauge(classes, seed, 3.0)), x).output
        assert np.abs(out - ref).max() / np.abs(ref).max() <= 1e-10


@pytest.mark.parametrize("name", ["mlp", "conv", "kitchen_sink"])
def test_euclidean_gradient_covariance(name, rng):
    net = NETS[name]()
    s = sample_gauge(solve_gauge_constraints(net), 11, 2.0)
    twin = apply_gauge(net, s)
    x = rng.normal(size=net.input.shape + (4,))
    t = rng.normal(size=net.shapes["logits"] + (4,))
    _, g, _ = loss_and_grad(net, x, t)
    _, gt, _ = loss_and_grad(twin, x, t)
    for node in net.nodes:
        for p in node.params:
            key = f"{node.name}.{p}"
            s_out = s[node.name]
            if p == "w":
                expect = g[key] / s_out[:, None] * s[node.inputs[0]][None, :]
            elif p == "k":
                expect = g[key] / s_out[:, None, None, None] * s[node.inputs[0]][None, :, None, None]
            elif p == "a":
                expect = g[key]
            else:
                expect = g[key] / s_out
            assert rel_fro(gt[key], expect) <= 1e-9, key


def test_affine_gain_gauge_rule():
    net = kitchen_sink(3)
    s = sample_gauge(solve_gauge_constraints(net), 2, 2.0)
    twin = apply_gauge(net, s)
    np.testing.assert_array_equal(twin["gain"].params["a"], net["gain"].params["a"])
    np.testing.assert_allclose(twin["gain"].params["c"], s["gain"] * net["gain"].params["c"], rtol=1e-15)
