import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from bimodal import errors
from bimodal.nn import (
    Dense,
    LayeredNetwork,
    OptimizerState,
    RegularizerConfig,
    accuracy,
    backprop,
    dense_network,
    dropout_apply,
    l2_closed_form,
    loss,
    loss_gradient,
    objective,
    predict,
    sigmoid,
    softmax,
    train,
)

from oracles import central_difference, gradients_agree


def _net(hidden, output, sizes=(4, 5, 3), seed=0):
    rng = np.random.default_rng(seed)
    layers = [Dense.init(sizes[0], sizes[1], hidden, rng), Dense.init(sizes[1], sizes[2], output, rng)]
    for layer in layers:
        layer.bias[:] = rng.normal(0, 0.3, layer.bias.shape)
    return LayeredNetwork(layers, (sizes[0],))


def _targets(rng, output, kind, n, k):
    if output == "softmax":
        return np.eye(k)[rng.integers(0, k, n)]
    if kind == "cross_entropy":
        return rng.integers(0, 2, (n, k)).astype(float)
    return rng.normal(size=(n, k))


COMBOS = [(h, o, kind) for h in ("sigmoid", "tanh", "relu")
          for o, kind in (("sigmoid", "cross_entropy"), ("softmax", "cross_entropy"),
                          ("sigmoid", "mse"), ("linear", "mse"), ("tanh", "mse"), ("softmax", "mse"))]
REGS = [None, RegularizerConfig(l2=0.3), RegularizerConfig(l1=0.2), RegularizerConfig(l2=0.1, l1=0.05)]


@pytest.mark.parametrize("hidden,output,kind", COMBOS)
@pytest.mark.parametrize("reg", REGS, ids=["none", "l2", "l1", "l2+l1"])
def test_backprop_matches_finite_differences(hidden, output, kind, reg):
    rng = np.random.default_rng(5)
    net = _net(hidden, output, seed=11)
    x = rng.normal(size=(6, 4))
    y = _targets(rng, output, kind, 6, 3)
    grads = backprop(net, x, y, kind, reg)
    numeric = central_difference(lambda: objective(net, x, y, kind, reg), net.params())
    assert gradients_agree(grads, numeric)


def test_backprop_with_fixed_dropout_masks():
    rng = np.random.default_rng(2)
    net = _net("tanh", "softmax", seed=4)
    x = rng.normal(size=(5, 4))
    y = np.eye(3)[rng.integers(0, 3, 5)]
    masks = [dropout_apply(np.ones((5, 5)), 0.4, 9)[1], None]
    grads = backprop(net, x, y, "cross_entropy", None, masks)
    numeric = central_difference(lambda: objective(net, x, y, "cross_entropy", None, masks),
                                 net.params())
    assert gradients_agree(grads, numeric)


def test_forward_examples():
    net = LayeredNetwork([Dense(np.zeros((3, 4)), np.zeros(3), "sigmoid")], (4,))
    np.testing.assert_array_equal(predict(net, np.ones(4)), [[0.5, 0.5, 0.5]])
    w, b = np.array([[2.0, -1.0]]), np.array([0.5])
    lin = LayeredNetwork([Dense(w, b, "linear")], (2,))
    assert predict(lin, np.array([3.0, 4.0]))[0, 0] == 2 * 3 - 4 + 0.5
    z = np.random.default_rng(0).normal(0, 20, (50, 7))
    np.testing.assert_allclose(softmax(z).sum(axis=1), 1.0, atol=1e-12)
    with pytest.raises(errors.ParameterError):
        predict(lin, np.ones(3))
    with pytest.raises(errors.ParameterError):
        LayeredNetwork([Dense(np.zeros((3, 4)), np.zeros(3)), Dense(np.zeros((2, 2)), np.zeros(2))], (4,))


def test_sigmoid_stable_at_extremes():
    s = sigmoid(np.array([-1000.0, 0.0, 1000.0]))
    np.testing.assert_array_equal(s, [0.0, 0.5, 1.0])


def test_loss_examples():
    y = np.array([[0.2, 0.7]])
    assert loss(y, y, "mse") == 0.0
    assert loss(np.array([[0.5]]), np.array([[0.5]]), "cross_entropy") == pytest.approx(math.log(2))
    assert np.isfinite(loss(np.array([[0.0]]), np.array([[1.0]]), "cross_entropy"))


@pytest.mark.parametrize("output", ["sigmoid", "softmax"])
def test_ce_gradient_wrt_pre_activation(output):
    rng = np.random.default_rng(3)
    logits = rng.normal(size=(4, 3))
    y = np.eye(3)[[0, 2, 1, 1]] if output == "softmax" else rng.integers(0, 2, (4, 3)).astype(float)
    z = softmax(logits) if output == "softmax" else sigmoid(logits)
    grad, pre = loss_gradient(z, y, "cross_entropy", output)
    assert pre
    np.testing.assert_array_equal(grad, (z - y) / 4)
    act = softmax if output == "softmax" else sigmoid
    numeric = central_difference(
        lambda: loss(act(logits), y, "cross_entropy", softmax_output=output == "softmax"), [logits])[0]
    np.testing.assert_allclose(grad, numeric, rtol=1e-4, atol=1e-8)


def test_zero_data_gradient_leaves_penalty_terms():
    net = _net("tanh", "linear", seed=1)
    x = np.random.default_rng(0).normal(size=(4, 4))
    y = predict(net, x)
    plain = backprop(net, x, y, "mse")
    assert all(np.all(g == 0) for g in plain)
    reg = RegularizerConfig(l2=0.7)
    g = backprop(net, x, y, "mse", reg)
    np.testing.assert_array_equal(g[0], 0.7 * net.layers[0].weight)
    np.testing.assert_array_equal(g[1], 0.0)  # biases are not penalized


def test_l1_subgradient_zero_at_zero():
    net = LayeredNetwork([Dense(np.array([[0.0, 2.0, -3.0]]), np.zeros(1), "linear")], (3,))
    x = np.ones((1, 3))
    y = predict(net, x)
    g = backprop(net, x, y, "mse", RegularizerConfig(l1=0.5))
    np.testing.assert_array_equal(g[0], [[0.0, 0.5, -0.5]])


def test_l2_step_equivalence():
    rng = np.random.default_rng(4)
    net = _net("sigmoid", "softmax", seed=8)
    x = rng.normal(size=(8, 4))
    y = np.eye(3)[rng.integers(0, 3, 8)]
    phi, eps = 0.05, 0.3
    data = backprop(net, x, y)
    expected = [(1 - eps * phi) * p - eps * g if m else p - eps * g
                for p, g, m in zip(net.params(), data, net.weight_mask())]
    params = net.params()
    OptimizerState("sgd", rate=eps).step(params, backprop(net, x, y, reg=RegularizerConfig(l2=phi)))
    for p, e in zip(params, expected):
        np.testing.assert_allclose(p, e, rtol=0, atol=1e-12)


def test_optimizer_first_steps():
    w = [np.array([1.0])]
    OptimizerState("sgd", rate=0.1).step(w, [2 * w[0]])
    assert w[0][0] == pytest.approx(0.8)
    w = [np.array([0.0])]
    OptimizerState("adagrad", rate=0.1, delta=1e-7).step(w, [np.array([3.0])])
    assert -w[0][0] == pytest.approx(0.1 * 3 / math.sqrt(9 + 1e-7))
    assert -w[0][0] == pytest.approx(0.1, abs=1e-8)
    opt = OptimizerState("rmsprop", rate=0.1, rho=0.9, delta=1e-6)
    w = [np.array([0.0])]
    opt.step(w, [np.array([2.0])])
    assert opt.accumulators[0][0] == pytest.approx(0.4)
    assert -w[0][0] == pytest.approx(0.1 * 2 / math.sqrt(0.4 + 1e-6))


def test_optimizer_validation():
    with pytest.raises(errors.ParameterError):
        OptimizerState("adam")
    with pytest.raises(errors.ParameterError):
        OptimizerState("rmsprop", rho=1.0)
    with pytest.raises(errors.ParameterError):
        OptimizerState("sgd", delta=0.0)


def test_step_decay_plateaus():
    opt = OptimizerState("sgd", rate=0.2, step_size=3, gamma=0.5)
    rates = [opt.current_rate(t) for t in range(9)]
    assert rates[:3] == [0.2] * 3 and rates[3:6] == [0.1] * 3 and rates[6:] == [0.05] * 3
    assert rates[3] / rates[0] == 0.5 and rates[6] / rates[3] == 0.5


def test_ridge_examples():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(5, 5))
    y = rng.normal(size=5)
    np.testing.assert_allclose(x @ l2_closed_form(x, y, 0.0), y, atol=1e-10)
    xs = rng.normal(size=(30, 4))
    assert np.linalg.norm(l2_closed_form(xs, rng.normal(size=30), 1e9)) < 1e-3
    with pytest.raises(errors.SingularityError):
        l2_closed_form(np.ones((4, 2)), np.ones(4), 0.0)


def test_ridge_is_the_fixed_point_of_decayed_descent():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(20, 5))
    y = rng.normal(size=20)
    phi, eps = 0.1, 0.01
    w = np.zeros(5)
    for _ in range(20000):
        w = (1 - eps * phi) * w - eps * x.T @ (x @ w - y)
    np.testing.assert_allclose(w, l2_closed_form(x, y, phi), atol=1e-6)


def test_dropout_examples():
    a = np.random.default_rng(0).uniform(size=(3, 4))
    out, mask = dropout_apply(a, 0.0, 1)
    np.testing.assert_array_equal(out, a)
    np.testing.assert_array_equal(mask, 1.0)
    m1 = dropout_apply(a, 0.5, 42)[1]
    m2 = dropout_apply(a, 0.5, 42)[1]
    np.testing.assert_array_equal(m1, m2)
    assert set(np.unique(m1)) <= {0.0, 2.0}
    with pytest.raises(errors.ParameterError):
        dropout_apply(a, 1.0, 0)


def test_dropout_expectation():
    a = np.array([0.2, 0.5, 0.9, 1.3])
    draws = np.tile(a, (100000, 1))
    masked, _ = dropout_apply(draws, 0.3, 123)
    np.testing.assert_allclose(masked.mean(axis=0), a, rtol=0.02)


@given(st.integers(0, 2 ** 20), st.floats(0.0, 0.9))
def test_dropout_mask_values(seed, rate):
    out, mask = dropout_apply(np.ones(50), rate, seed)
    assert np.all((mask == 0) | np.isclose(mask, 1 / (1 - rate)))


def test_training_learns_a_separable_problem():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(200, 2))
    labels = (x[:, 0] + x[:, 1] > 0).astype(int)
    net = dense_network([2, 6, 2], seed=0)
    curve = []
    train(net, x, np.eye(2)[labels], OptimizerState("sgd", rate=0.5), 60, 16, curve=curve)
    assert accuracy(net, x, labels) > 0.97
    assert curve[-1][1] < curve[0][1]
    assert [c[0] for c in curve] == [13 * (i + 1) for i in range(60)]


def test_training_with_dropout_is_seed_deterministic():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(40, 3))
    y = np.eye(2)[(x[:, 0] > 0).astype(int)]
    outs = []
    for _ in range(2):
        net = dense_network([3, 5, 2], seed=2)
        train(net, x, y, OptimizerState("rmsprop", rate=0.01), 5, 8,
              reg=RegularizerConfig(l2=0.01, dropout=0.2), seed=3)
        outs.append(predict(net, x))
    np.testing.assert_array_equal(outs[0], outs[1])
