import numpy as np
import pytest

from bimodal import errors
from bimodal.cnn import (
    Conv2D,
    MaxPool2D,
    build_toy_embedder,
    conv_backward,
    conv_forward,
    conv_output_size,
    extract_embedding,
    extract_embeddings,
    init_network,
    maxpool_backward,
    maxpool_forward,
    train_embedder,
)
from bimodal.io import GrayImage
from bimodal.nn import Dense, Flatten, LayeredNetwork, OptimizerState, RegularizerConfig, backprop, objective
from bimodal.synth import random_face_pattern, synth_face

from oracles import central_difference, gradients_agree


def test_conv_output_arithmetic():
    assert conv_output_size(500, 500, 20) == (481, 481)
    assert 481 * 481 == 231361
    with pytest.raises(errors.ParameterError):
        conv_forward(np.zeros((1, 3, 3)), np.zeros((1, 1, 4, 4)))


def test_conv_examples():
    out = conv_forward(np.ones((1, 5, 5)), np.ones((1, 1, 3, 3)))
    np.testing.assert_array_equal(out, np.full((1, 3, 3), 9.0))
    x = np.arange(25.0).reshape(1, 5, 5)
    k = np.zeros((1, 1, 3, 3))
    k[0, 0, 2, 2] = 1.0
    np.testing.assert_array_equal(conv_forward(x, k)[0], x[0, 2:, 2:])


def test_conv_matches_loop():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 6, 7))
    k = rng.normal(size=(3, 2, 3, 3))
    out = conv_forward(x, k)
    for o in range(3):
        for i in range(4):
            for j in range(5):
                assert out[o, i, j] == pytest.approx(np.sum(x[:, i:i + 3, j:j + 3] * k[o]))


def test_pool_examples():
    x = np.random.default_rng(1).normal(size=(1, 10, 10))
    assert maxpool_forward(x, 5).size * 25 == x.size
    np.testing.assert_array_equal(maxpool_forward(np.full((2, 6, 6), 3.0), 2), 3.0)


def test_conv_backward_finite_differences():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, 2, 6, 5))
    k = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    g = rng.normal(size=(2, 3, 4, 3))

    def f():
        return float(np.sum(g * conv_forward(x, k, b)))

    dx, dk, db = conv_backward(x, k, g)
    assert gradients_agree([dx, dk, db], central_difference(f, [x, k, b]))


def test_pool_backward_finite_differences():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 2, 6, 7))  # trailing column dropped by the 2x2 windows
    g = rng.normal(size=(2, 2, 3, 3))

    def f():
        return float(np.sum(g * maxpool_forward(x, 2)))

    assert gradients_agree([maxpool_backward(x, 2, g)], central_difference(f, [x]))


def _small_cnn(rng, act="tanh"):
    layers = [Conv2D.init(1, 2, 3, act, rng), MaxPool2D(2), Flatten(),
              Dense.init(2 * 3 * 3, 4, "tanh", rng), Dense.init(4, 3, "softmax", rng)]
    return LayeredNetwork(layers, (1, 8, 8))


@pytest.mark.parametrize("reg", [None, RegularizerConfig(l2=0.2), RegularizerConfig(l1=0.1)],
                         ids=["none", "l2", "l1"])
def test_cnn_backprop_finite_differences(reg):
    rng = np.random.default_rng(4)
    net = _small_cnn(rng)
    x = rng.normal(size=(3, 1, 8, 8))
    y = np.eye(3)[[0, 2, 1]]
    grads = backprop(net, x, y, "cross_entropy", reg)
    numeric = central_difference(lambda: objective(net, x, y, "cross_entropy", reg), net.params())
    assert gradients_agree(grads, numeric)


def test_default_spec_shape_chain():
    spec = build_toy_embedder((32, 32))
    assert spec.shape_chain() == [(1, 32, 32), (8, 30, 30), (8, 15, 15), (8, 13, 13), (8, 6, 6),
                                  (288,), (64,), (32,), (10,)]
    net = init_network(spec)
    emb = extract_embedding(net, np.zeros((32, 32)))
    assert emb.shape == (32,)
    n_params = sum(p.size for p in net.params())
    assert n_params == (8 * 9 + 8) + (8 * 8 * 9 + 8) + (288 * 64 + 64) + (64 * 32 + 32) + (32 * 10 + 10)


def test_embedding_errors_and_identity():
    net = init_network(build_toy_embedder((12, 12), 3, 4, 2, 6))
    img = GrayImage(np.random.default_rng(0).uniform(0, 255, (12, 12)))
    np.testing.assert_array_equal(extract_embedding(net, img), extract_embedding(net, img))
    with pytest.raises(errors.ParameterError):
        extract_embedding(net, np.zeros((10, 12)))


def test_trained_embeddings_cluster_by_class():
    rng = np.random.default_rng(0)
    patterns = [random_face_pattern(rng, (16, 16)) for _ in range(10)]
    images, labels = [], []
    for c, p in enumerate(patterns):
        for _ in range(12):
            images.append(synth_face(p, rng))
            labels.append(c)
    net = init_network(build_toy_embedder((16, 16), 10, 16, 4, 32), seed=0)
    train_embedder(net, images, labels, OptimizerState("rmsprop", rate=0.003), epochs=15, seed=0)
    e = extract_embeddings(net, images)
    e = e / np.linalg.norm(e, axis=1, keepdims=True)
    cos = e @ e.T
    lab = np.array(labels)
    same = lab[:, None] == lab[None, :]
    off = ~np.eye(len(lab), dtype=bool)
    assert cos[same & off].mean() > cos[~same].mean()
