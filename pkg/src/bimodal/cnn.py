"""Convolution and max-pooling layers plus a small face embedding network."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ParameterError
from .nn import (
    Dense,
    Flatten,
    Layer,
    LayeredNetwork,
    OptimizerState,
    activate,
    activation_backward,
    forward,
    glorot_uniform,
    register_layer,
    train,
)


def _nchw(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        return x[None, None], 2
    if x.ndim == 3:
        return x[None], 3
    return x, 4


def conv_forward(x, kernels, bias=None):
    """Valid, stride-1 cross-correlation.

    ``x`` is (C, H, W) or (n, C, H, W); ``kernels`` is (C_out, C_in, k, k).
    """
    xb, nd = _nchw(x)
    kernels = np.asarray(kernels, dtype=np.float64)
    c_out, c_in, kh, kw = kernels.shape
    if xb.shape[1] != c_in:
        raise ParameterError(f"input has {xb.shape[1]} channels, kernels expect {c_in}")
    if kh > xb.shape[2] or kw > xb.shape[3]:
        raise ParameterError("kernel larger than input")
    win = sliding_window_view(xb, (kh, kw), axis=(2, 3))  # n, C, H', W', k, k
    out = np.einsum("nchwij,ocij->nohw", win, kernels, optimize=True)
    if bias is not None:
        out = out + np.asarray(bias)[None, :, None, None]
    return out[0] if nd == 3 else out


def conv_backward(x, kernels, grad_out):
    """Gradients of a valid cross-correlation: (d input, d kernels, d bias)."""
    xb, nd = _nchw(x)
    g = np.asarray(grad_out, dtype=np.float64)
    if g.ndim == 3:
        g = g[None]
    kh, kw = kernels.shape[2:]
    win = sliding_window_view(xb, (kh, kw), axis=(2, 3))
    d_kernels = np.einsum("nchwij,nohw->ocij", win, g, optimize=True)
    d_bias = g.sum(axis=(0, 2, 3))
    padded = np.pad(g, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
    gwin = sliding_window_view(padded, (kh, kw), axis=(2, 3))
    d_x = np.einsum("nohwij,ocij->nchw", gwin, kernels[:, :, ::-1, ::-1], optimize=True)
    if nd == 3:
        d_x = d_x[0]
    return d_x, d_kernels, d_bias


def conv_output_size(h, w, k):
    if k > h or k > w:
        raise ParameterError("kernel larger than input")
    return h - k + 1, w - k + 1


def _pool_view(xb, p):
    n, c, h, w = xb.shape
    hp, wp = h // p, w // p
    if hp == 0 or wp == 0:
        raise ParameterError("pooling window larger than input")
    trimmed = xb[:, :, : hp * p, : wp * p]
    return trimmed.reshape(n, c, hp, p, wp, p).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, hp, wp, p * p)


def maxpool_forward(x, window):
    """Non-overlapping max pooling; trailing rows/cols that do not fill a window are dropped."""
    xb, nd = _nchw(x)
    out = _pool_view(xb, window).max(axis=-1)
    return out[0] if nd == 3 else (out[0, 0] if nd == 2 else out)


def maxpool_backward(x, window, grad_out):
    """Route each gradient to the first maximal entry of its window."""
    xb, nd = _nchw(x)
    g = np.asarray(grad_out, dtype=np.float64).reshape(
        xb.shape[0], xb.shape[1], xb.shape[2] // window, xb.shape[3] // window)
    view = _pool_view(xb, window)
    arg = view.argmax(axis=-1)
    n, c, hp, wp = arg.shape
    d = np.zeros((n, c, hp, wp, window * window))
    np.put_along_axis(d, arg[..., None], g[..., None], axis=-1)
    d = d.reshape(n, c, hp, wp, window, window).transpose(0, 1, 2, 4, 3, 5).reshape(
        n, c, hp * window, wp * window)
    dx = np.zeros_like(xb)
    dx[:, :, : hp * window, : wp * window] = d
    if nd == 3:
        return dx[0]
    if nd == 2:
        return dx[0, 0]
    return dx


@register_layer
class Conv2D(Layer):
    kind = "conv"

    def __init__(self, kernels, bias, activation="relu"):
        self.kernels = np.asarray(kernels, dtype=np.float64)
        self.bias = np.asarray(bias, dtype=np.float64)
        self.activation = activation

    @classmethod
    def init(cls, c_in, c_out, k, activation, rng):
        fan_in, fan_out = c_in * k * k, c_out * k * k
        return cls(glorot_uniform(rng, fan_in, fan_out, (c_out, c_in, k, k)), np.zeros(c_out),
                   activation)

    @property
    def n_params(self):
        return self.kernels.size + self.bias.size

    def params(self):
        return [self.kernels, self.bias]

    def weight_mask(self):
        return [True, False]

    def output_shape(self, input_shape):
        c, h, w = input_shape
        if c != self.kernels.shape[1]:
            raise ParameterError("channel mismatch in conv chain")
        return (self.kernels.shape[0],) + conv_output_size(h, w, self.kernels.shape[2])

    def forward(self, a):
        return activate(conv_forward(a, self.kernels, self.bias), self.activation)

    def backward(self, a_in, out, grad, pre_activation=False):
        delta = grad if pre_activation else activation_backward(out, grad, self.activation)
        dx, dk, db = conv_backward(a_in, self.kernels, delta)
        return dx, [dk, db]

    def describe(self):
        return {"kind": self.kind, "activation": self.activation}


@register_layer
class MaxPool2D(Layer):
    kind = "maxpool"

    def __init__(self, window=2):
        self.window = int(window)

    def output_shape(self, input_shape):
        c, h, w = input_shape
        if h // self.window == 0 or w // self.window == 0:
            raise ParameterError("pooling window larger than input")
        return (c, h // self.window, w // self.window)

    def forward(self, a):
        return maxpool_forward(a, self.window)

    def backward(self, a_in, out, grad, pre_activation=False):
        return maxpool_backward(a_in, self.window, grad), []

    def describe(self):
        return {"kind": self.kind, "window": self.window}


@dataclass
class ConvNetSpec:
    """Layer descriptors for an embedder; the penultimate dense layer is the embedding."""

    input_shape: tuple
    layers: list
    n_classes: int
    embedding_dim: int

    def shape_chain(self):
        shapes = [tuple(self.input_shape)]
        for d in self.layers:
            c, h, w = shapes[-1] if len(shapes[-1]) == 3 else (None, None, None)
            if d["kind"] == "conv":
                shapes.append((d["channels"],) + conv_output_size(h, w, d["kernel"]))
            elif d["kind"] == "maxpool":
                shapes.append((c, h // d["window"], w // d["window"]))
            elif d["kind"] == "flatten":
                shapes.append((int(np.prod(shapes[-1])),))
            else:
                shapes.append((d["width"],))
        for s in shapes:
            if any(v <= 0 for v in s):
                raise ParameterError(f"non-positive spatial size in chain {shapes}")
        return shapes


def build_toy_embedder(input_size=(32, 32), n_classes=10, embedding_dim=32, channels=8,
                       hidden=64) -> ConvNetSpec:
    """Two conv3/maxpool2 blocks, dense ``hidden``, dense ``embedding_dim``, softmax."""
    if embedding_dim < 2:
        raise ParameterError("embedding_dim must be >= 2")
    h, w = input_size
    layers = [
        {"kind": "conv", "kernel": 3, "channels": channels, "activation": "relu"},
        {"kind": "maxpool", "window": 2},
        {"kind": "conv", "kernel": 3, "channels": channels, "activation": "relu"},
        {"kind": "maxpool", "window": 2},
        {"kind": "flatten"},
        {"kind": "dense", "width": hidden, "activation": "tanh"},
        {"kind": "dense", "width": embedding_dim, "activation": "tanh"},
        {"kind": "dense", "width": n_classes, "activation": "softmax"},
    ]
    spec = ConvNetSpec((1, h, w), layers, n_classes, embedding_dim)
    spec.shape_chain()
    return spec


def init_network(spec: ConvNetSpec, seed=0) -> LayeredNetwork:
    rng = np.random.default_rng(seed)
    shapes = spec.shape_chain()
    layers = []
    for d, shape_in in zip(spec.layers, shapes[:-1]):
        if d["kind"] == "conv":
            layers.append(Conv2D.init(shape_in[0], d["channels"], d["kernel"], d["activation"], rng))
        elif d["kind"] == "maxpool":
            layers.append(MaxPool2D(d["window"]))
        elif d["kind"] == "flatten":
            layers.append(Flatten())
        else:
            layers.append(Dense.init(shape_in[0], d["width"], d["activation"], rng))
    return LayeredNetwork(layers, spec.input_shape)


def _images_to_batch(net, images):
    arr = np.asarray([getattr(im, "pixels", im) for im in images], dtype=np.float64)
    c, h, w = net.input_shape
    if arr.shape[1:] == (h, w):
        arr = arr[:, None]
    if arr.shape[1:] != (c, h, w):
        raise ParameterError(f"images of shape {arr.shape[1:]} do not fit input {net.input_shape}")
    return arr / 255.0


def extract_embedding(net: LayeredNetwork, image) -> np.ndarray:
    """Penultimate dense-layer activations (the layer feeding the softmax)."""
    return extract_embeddings(net, [image])[0]


def extract_embeddings(net: LayeredNetwork, images, batch_size=256) -> np.ndarray:
    x = _images_to_batch(net, images)
    out = [forward(net, x[i:i + batch_size])[-2] for i in range(0, x.shape[0], batch_size)]
    return np.vstack(out)


def train_embedder(net, images, labels, optimizer=None, epochs=20, batch_size=32, seed=0,
                   curve=None):
    labels = np.asarray(labels)
    n_classes = net.layers[-1].n_out
    y = np.eye(n_classes)[labels]
    optimizer = optimizer or OptimizerState("rmsprop", rate=0.002)
    return train(net, _images_to_batch(net, images), y, optimizer, epochs, batch_size,
                 "cross_entropy", None, seed, curve)
