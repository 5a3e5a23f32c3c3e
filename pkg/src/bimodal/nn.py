"""Layered feed-forward networks trained by exact backpropagation.

Networks are ordered lists of layers. Each layer maps a batch of inputs to a
batch of post-activation outputs and knows how to push a gradient back
through itself. Dense layers live here; convolution and pooling layers are
in :mod:`bimodal.cnn` and plug into the same protocol.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError, SingularityError

ACTIVATIONS = ("sigmoid", "tanh", "linear", "softmax", "relu")
CE_CLAMP = 1e-12

LAYER_TYPES = {}


def register_layer(cls):
    LAYER_TYPES[cls.kind] = cls
    return cls


def sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def softmax(z):
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def activate(z, kind):
    if kind == "sigmoid":
        return sigmoid(z)
    if kind == "tanh":
        return np.tanh(z)
    if kind == "linear":
        return z
    if kind == "softmax":
        return softmax(z)
    if kind == "relu":
        return np.maximum(z, 0.0)
    raise ParameterError(f"unknown activation {kind!r}")


def activation_backward(out, grad, kind):
    """Gradient w.r.t. the pre-activation given the gradient w.r.t. the output."""
    if kind == "sigmoid":
        return grad * out * (1.0 - out)
    if kind == "tanh":
        return grad * (1.0 - out * out)
    if kind == "linear":
        return grad
    if kind == "relu":
        return grad * (out > 0)
    if kind == "softmax":
        return out * (grad - np.sum(grad * out, axis=-1, keepdims=True))
    raise ParameterError(f"unknown activation {kind!r}")


def glorot_uniform(rng, fan_in, fan_out, shape):
    r = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-r, r, size=shape)


class Layer:
    kind = ""
    activation = "linear"

    def params(self):
        return []

    def weight_mask(self):
        """Flags marking which entries of :meth:`params` are penalized weights."""
        return [False] * len(self.params())

    def output_shape(self, input_shape):
        raise NotImplementedError

    def forward(self, a):
        raise NotImplementedError

    def backward(self, a_in, out, grad, pre_activation=False):
        """Return (grad w.r.t. input, list of parameter gradients)."""
        raise NotImplementedError

    def describe(self):
        return {"kind": self.kind}


@register_layer
class Dense(Layer):
    kind = "dense"

    def __init__(self, weight, bias, activation="sigmoid"):
        self.weight = np.asarray(weight, dtype=np.float64)  # (out, in)
        self.bias = np.asarray(bias, dtype=np.float64)
        if activation not in ACTIVATIONS:
            raise ParameterError(f"unknown activation {activation!r}")
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ParameterError("dense weight/bias shapes disagree")
        self.activation = activation

    @classmethod
    def init(cls, n_in, n_out, activation, rng):
        return cls(glorot_uniform(rng, n_in, n_out, (n_out, n_in)), np.zeros(n_out), activation)

    @property
    def n_in(self):
        return self.weight.shape[1]

    @property
    def n_out(self):
        return self.weight.shape[0]

    def params(self):
        return [self.weight, self.bias]

    def weight_mask(self):
        return [True, False]

    def output_shape(self, input_shape):
        if tuple(input_shape) != (self.n_in,):
            raise ParameterError(f"dense layer expects ({self.n_in},), got {tuple(input_shape)}")
        return (self.n_out,)

    def forward(self, a):
        if a.shape[-1] != self.n_in:
            raise ParameterError(f"input dimension {a.shape[-1]} != {self.n_in}")
        return activate(a @ self.weight.T + self.bias, self.activation)

    def backward(self, a_in, out, grad, pre_activation=False):
        delta = grad if pre_activation else activation_backward(out, grad, self.activation)
        return delta @ self.weight, [delta.T @ a_in, delta.sum(axis=0)]

    def describe(self):
        return {"kind": self.kind, "activation": self.activation}


@register_layer
class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, input_shape):
        return (int(np.prod(input_shape)),)

    def forward(self, a):
        return a.reshape(a.shape[0], -1)

    def backward(self, a_in, out, grad, pre_activation=False):
        return grad.reshape(a_in.shape), []


class LayeredNetwork:
    blob_kind = "network"

    def __init__(self, layers, input_shape):
        self.layers = list(layers)
        self.input_shape = tuple(int(d) for d in input_shape)
        self.shape_chain()  # validates chain consistency

    def shape_chain(self):
        shapes = [self.input_shape]
        for layer in self.layers:
            shapes.append(tuple(layer.output_shape(shapes[-1])))
        return shapes

    def params(self):
        return [p for layer in self.layers for p in layer.params()]

    def weight_mask(self):
        return [m for layer in self.layers for m in layer.weight_mask()]

    def copy(self):
        return LayeredNetwork.from_state(*self.to_state())

    def to_state(self):
        meta = {"input_shape": list(self.input_shape),
                "layers": [layer.describe() for layer in self.layers]}
        arrays = {}
        for i, layer in enumerate(self.layers):
            for j, p in enumerate(layer.params()):
                arrays[f"layer{i:03d}.p{j}"] = p
        return meta, arrays

    @classmethod
    def from_state(cls, meta, arrays):
        from . import cnn  # noqa: F401  registers conv/pool layers

        layers = []
        for i, desc in enumerate(meta["layers"]):
            desc = dict(desc)
            kind = desc.pop("kind")
            ps = [arrays[f"layer{i:03d}.p{j}"].copy() for j in range(2)
                  if f"layer{i:03d}.p{j}" in arrays]
            layers.append(LAYER_TYPES[kind](*ps, **desc))
        return cls(layers, meta["input_shape"])

    def __repr__(self):
        return f"LayeredNetwork({' -> '.join(str(s) for s in self.shape_chain())})"


def dense_network(sizes, hidden="sigmoid", output="softmax", seed=0):
    """Fully connected net with layer widths ``sizes`` (input first)."""
    rng = np.random.default_rng(seed)
    layers = [Dense.init(a, b, hidden if i < len(sizes) - 2 else output, rng)
              for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]))]
    return LayeredNetwork(layers, (sizes[0],))


def _batch(net, x):
    x = np.asarray(x, dtype=np.float64)
    if x.shape == net.input_shape:
        x = x[None]
    if x.shape[1:] != net.input_shape:
        raise ParameterError(f"input shape {x.shape[1:]} != network input {net.input_shape}")
    return x


def forward(net: LayeredNetwork, x, dropout_masks=None):
    """All activations ``[a0, a1, ..., aL]`` for a batch (or single sample).

    ``dropout_masks[i]``, when not ``None``, multiplies the output of layer
    ``i`` (already scaled for inverted dropout).
    """
    acts = [_batch(net, x)]
    for i, layer in enumerate(net.layers):
        out = layer.forward(acts[-1])
        if dropout_masks is not None and dropout_masks[i] is not None:
            out = out * dropout_masks[i]
        acts.append(out)
    return acts


def predict(net, x):
    return forward(net, x)[-1]


# --------------------------------------------------------------------------
# losses

def _clamp(z):
    return np.clip(z, CE_CLAMP, 1.0 - CE_CLAMP)


def loss(prediction, target, kind="cross_entropy", softmax_output=False) -> float:
    """Mean per-sample loss.

    ``mse``: ``1/2 sum_k (Z_k - Y_k)^2``. ``cross_entropy``: the binary
    form ``-sum_k [Y ln Z + (1-Y) ln(1-Z)]``, or ``-sum_k Y ln Z`` when the
    outputs are a softmax distribution. Predictions are clamped to
    ``[1e-12, 1 - 1e-12]`` before the logs.
    """
    z = np.atleast_2d(np.asarray(prediction, dtype=np.float64))
    y = np.atleast_2d(np.asarray(target, dtype=np.float64))
    if z.shape != y.shape:
        raise ParameterError("prediction and target shapes differ")
    n = z.shape[0]
    if kind == "mse":
        return float(0.5 * np.sum((z - y) ** 2) / n)
    if kind == "cross_entropy":
        zc = _clamp(z)
        if softmax_output:
            return float(-np.sum(y * np.log(zc)) / n)
        return float(-np.sum(y * np.log(zc) + (1.0 - y) * np.log(1.0 - zc)) / n)
    raise ParameterError(f"unknown loss {kind!r}")


def loss_gradient(prediction, target, kind, activation):
    """Gradient of the mean loss; returns (grad, is_pre_activation)."""
    z, y = prediction, target
    n = z.shape[0]
    if kind == "cross_entropy" and activation in ("sigmoid", "softmax"):
        return (z - y) / n, True
    if kind == "mse":
        return (z - y) / n, False
    if kind == "cross_entropy":
        zc = _clamp(z)
        return (-y / zc + (1.0 - y) / (1.0 - zc)) / n, False
    raise ParameterError(f"unknown loss {kind!r}")


@dataclass
class RegularizerConfig:
    l2: float = 0.0
    l1: float = 0.0
    dropout: object = 0.0  # float for every hidden layer, or a per-layer list

    def __post_init__(self):
        if self.l2 < 0 or self.l1 < 0:
            raise ParameterError("penalty coefficients must be non-negative")
        rates = self.dropout if isinstance(self.dropout, (list, tuple)) else [self.dropout]
        if any(not 0.0 <= r < 1.0 for r in rates):
            raise ParameterError("dropout rates must lie in [0, 1)")

    def rate_for(self, layer_index, n_layers):
        if layer_index >= n_layers - 1:
            return 0.0
        if isinstance(self.dropout, (list, tuple)):
            return float(self.dropout[layer_index]) if layer_index < len(self.dropout) else 0.0
        return float(self.dropout)


def penalty(net, reg: RegularizerConfig | None) -> float:
    if reg is None:
        return 0.0
    total = 0.0
    for p, is_w in zip(net.params(), net.weight_mask()):
        if is_w:
            total += 0.5 * reg.l2 * np.sum(p * p) + reg.l1 * np.sum(np.abs(p))
    return float(total)


def objective(net, x, y, kind="cross_entropy", reg=None, dropout_masks=None) -> float:
    out = forward(net, x, dropout_masks)[-1]
    soft = net.layers[-1].activation == "softmax"
    return loss(out, y, kind, softmax_output=soft) + penalty(net, reg)


def backprop(net: LayeredNetwork, x, y, kind="cross_entropy", reg=None, dropout_masks=None):
    """Exact gradients of ``mean loss + l2/2 ||W||^2 + l1 ||W||_1``.

    Returns one gradient array per entry of ``net.params()``. The L1 term
    uses ``sign(w)``, which is 0 at ``w == 0``.
    """
    # activation derivatives need each layer's output before its dropout mask
    acts, raw = [_batch(net, x)], []
    for i, layer in enumerate(net.layers):
        out = layer.forward(acts[-1])
        raw.append(out)
        if dropout_masks is not None and dropout_masks[i] is not None:
            out = out * dropout_masks[i]
        acts.append(out)
    y = np.asarray(y, dtype=np.float64).reshape(acts[-1].shape)
    last = net.layers[-1]
    grad, pre = loss_gradient(acts[-1], y, kind, last.activation)
    grads_rev = []
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        if dropout_masks is not None and dropout_masks[i] is not None:
            grad = grad * dropout_masks[i]
        grad, pgrads = layer.backward(acts[i], raw[i], grad, pre_activation=pre)
        pre = False
        grads_rev.append(pgrads)
    grads = [g for pg in reversed(grads_rev) for g in pg]
    if reg is not None and (reg.l2 or reg.l1):
        for j, (p, is_w) in enumerate(zip(net.params(), net.weight_mask())):
            if is_w:
                grads[j] = grads[j] + reg.l2 * p + reg.l1 * np.sign(p)
    return grads


# --------------------------------------------------------------------------
# optimizers

@dataclass
class OptimizerState:
    """Plain SGD, AdaGrad or RMSProp with an optional step-decay schedule.

    The learning rate at update ``t`` is ``rate * gamma ** (t // step_size)``.
    """

    kind: str = "sgd"
    rate: float = 0.01
    delta: float = 1e-7
    rho: float = 0.9
    step_size: int = 0
    gamma: float = 1.0
    t: int = 0
    accumulators: list = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in ("sgd", "adagrad", "rmsprop"):
            raise ParameterError(f"unknown optimizer {self.kind!r}")
        if self.rate < 0 or self.delta <= 0:
            raise ParameterError("need rate >= 0 and delta > 0")
        if self.kind == "rmsprop" and not 0 < self.rho < 1:
            raise ParameterError("rho must lie in (0, 1)")

    def current_rate(self, t=None):
        t = self.t if t is None else t
        if self.step_size and self.step_size > 0:
            return self.rate * self.gamma ** (t // self.step_size)
        return self.rate

    def step(self, params, grads):
        """Update ``params`` in place."""
        if not self.accumulators:
            self.accumulators = [np.zeros_like(p) for p in params]
        eps = self.current_rate()
        for p, g, acc in zip(params, grads, self.accumulators):
            if self.kind == "sgd":
                p -= eps * g
            elif self.kind == "adagrad":
                acc += g * g
                p -= eps * g / np.sqrt(acc + self.delta)
            else:
                acc *= self.rho
                acc += (1.0 - self.rho) * g * g
                p -= eps * g / np.sqrt(acc + self.delta)
        self.t += 1
        return params


def dropout_apply(activations, rate, rng):
    """Inverted dropout: zero each unit with probability ``rate``, scale survivors.

    Returns ``(masked, mask)`` where ``mask`` holds the multipliers (0 or
    ``1/(1-rate)``), so ``masked == activations * mask``.
    """
    if not 0.0 <= rate < 1.0:
        raise ParameterError("dropout rate must lie in [0, 1)")
    rng = np.random.default_rng(rng)
    a = np.asarray(activations, dtype=np.float64)
    if rate == 0.0:
        mask = np.ones_like(a)
    else:
        mask = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return a * mask, mask


def l2_closed_form(x, y, phi):
    """Ridge solution ``(X'X + phi I)^-1 X'y``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    a = x.T @ x + phi * np.eye(x.shape[1])
    if phi == 0 and np.linalg.matrix_rank(a) < a.shape[0]:
        raise SingularityError("X'X is singular; use phi > 0")
    return np.linalg.solve(a, x.T @ y)


def accuracy(net, x, labels):
    out = predict(net, x)
    if out.shape[1] == 1:
        pred = (out[:, 0] >= 0.5).astype(int)
    else:
        pred = out.argmax(axis=1)
    return float(np.mean(pred == np.asarray(labels)))


def train(net, x, y, optimizer: OptimizerState, epochs=10, batch_size=32, kind="cross_entropy",
          reg=None, seed=0, curve=None):
    """Minibatch training; ``curve`` collects ``(iteration, loss, accuracy)`` per epoch."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    rng = np.random.default_rng(seed)
    n = x.shape[0]
    params = net.params()
    labels = y.argmax(axis=1) if y.ndim == 2 and y.shape[1] > 1 else y.ravel()
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            masks = _draw_masks(net, x[idx], reg, rng)
            grads = backprop(net, x[idx], y[idx], kind, reg, masks)
            optimizer.step(params, grads)
        if curve is not None:
            curve.append((optimizer.t, objective(net, x, y, kind, reg), accuracy(net, x, labels)))
    return net


def _draw_masks(net, xb, reg, rng):
    if reg is None:
        return None
    n_layers = len(net.layers)
    if all(reg.rate_for(i, n_layers) == 0 for i in range(n_layers)):
        return None
    masks = []
    shape = (xb.shape[0],)
    chain = net.shape_chain()
    for i in range(n_layers):
        rate = reg.rate_for(i, n_layers)
        if rate > 0 and isinstance(net.layers[i], Dense):
            masks.append(dropout_apply(np.ones(shape + chain[i + 1]), rate, rng)[1])
        else:
            masks.append(None)
    return masks
