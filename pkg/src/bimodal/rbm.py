"""Restricted Boltzmann machines, CD-1 training and deep belief network stacks."""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import ParameterError
from .nn import Dense, LayeredNetwork, OptimizerState, forward, sigmoid, train

SPEAKER_TOPOLOGY = (2048, 2048, 2048, 2048)
FUSION_TOPOLOGY = (3000, 3000, 3000, 3000)
FUSION_INPUT_DIM = 3148
ENUMERATION_LIMIT = 20


@dataclass
class Rbm:
    W: np.ndarray  # (V, H)
    b: np.ndarray  # visible bias (V,)
    c: np.ndarray  # hidden bias (H,)
    visible_type: str = "bernoulli"

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        self.c = np.asarray(self.c, dtype=np.float64)
        if self.visible_type not in ("bernoulli", "gaussian"):
            raise ParameterError(f"unknown visible type {self.visible_type!r}")
        v, h = self.W.shape
        if self.b.shape != (v,) or self.c.shape != (h,):
            raise ParameterError("RBM bias shapes do not match W")

    @classmethod
    def init(cls, n_visible, n_hidden, visible_type="bernoulli", seed=0, scale=0.01):
        rng = np.random.default_rng(seed)
        return cls(rng.normal(0.0, scale, (n_visible, n_hidden)), np.zeros(n_visible),
                   np.zeros(n_hidden), visible_type)

    @property
    def n_visible(self):
        return self.W.shape[0]

    @property
    def n_hidden(self):
        return self.W.shape[1]

    def copy(self):
        return Rbm(self.W.copy(), self.b.copy(), self.c.copy(), self.visible_type)


def hidden_given_visible(rbm: Rbm, v):
    """``p(h_j = 1 | v) = sigmoid(v' W[:, j] + c_j)``."""
    return sigmoid(np.asarray(v, dtype=np.float64) @ rbm.W + rbm.c)


def visible_given_hidden(rbm: Rbm, h):
    """Bernoulli probabilities, or the unit-variance Gaussian mean ``h W' + b``."""
    a = np.asarray(h, dtype=np.float64) @ rbm.W.T + rbm.b
    return a if rbm.visible_type == "gaussian" else sigmoid(a)


def cd1_statistics(rbm: Rbm, v0, rng):
    """One Gibbs step from the data: returns ``(dW, db, dc)`` averaged over the batch."""
    v0 = np.atleast_2d(np.asarray(v0, dtype=np.float64))
    ph0 = hidden_given_visible(rbm, v0)
    h0 = (rng.random(ph0.shape) < ph0).astype(np.float64)
    v1 = visible_given_hidden(rbm, h0)
    ph1 = hidden_given_visible(rbm, v1)
    n = v0.shape[0]
    return (v0.T @ ph0 - v1.T @ ph1) / n, (v0 - v1).mean(axis=0), (ph0 - ph1).mean(axis=0)


def cd1_update(rbm: Rbm, batch, rate, rng) -> Rbm:
    """Contrastive-divergence step; negative phase uses sampled hiddens, mean-field visibles."""
    rng = np.random.default_rng(rng)
    batch = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    if batch.shape[1] != rbm.n_visible:
        raise ParameterError("batch width does not match the visible layer")
    dw, db, dc = cd1_statistics(rbm, batch, rng)
    return Rbm(rbm.W + rate * dw, rbm.b + rate * db, rbm.c + rate * dc, rbm.visible_type)


def cd1_expected_update(rbm: Rbm, data):
    """Exact expectation of the CD-1 update over the hidden sample (small H only)."""
    data = np.atleast_2d(np.asarray(data, dtype=np.float64))
    _check_enumerable(rbm.n_hidden)
    states = _binary_states(rbm.n_hidden)
    ph0 = hidden_given_visible(rbm, data)  # (n, H)
    # probability of each hidden configuration given each data row
    logp = states @ np.log(np.clip(ph0, 1e-300, None)).T + (1 - states) @ np.log(
        np.clip(1 - ph0, 1e-300, None)).T  # (S, n)
    probs = np.exp(logp)
    v1 = visible_given_hidden(rbm, states)  # (S, V)
    ph1 = hidden_given_visible(rbm, v1)  # (S, H)
    n = data.shape[0]
    w_state = probs.sum(axis=1) / n  # (S,)
    dw = data.T @ ph0 / n - (v1 * w_state[:, None]).T @ ph1
    db = data.mean(axis=0) - w_state @ v1
    dc = ph0.mean(axis=0) - w_state @ ph1
    return dw, db, dc


def _check_enumerable(count):
    if count > ENUMERATION_LIMIT:
        raise ParameterError(f"{count} units exceed the enumeration limit {ENUMERATION_LIMIT}")


def _binary_states(n):
    return np.array(list(itertools.product((0.0, 1.0), repeat=n))).reshape(-1, n)


def energy(rbm: Rbm, v, h):
    """``E(v, h) = -b'v - c'h - v'Wh`` for binary units."""
    v = np.atleast_2d(v)
    h = np.atleast_2d(h)
    return -(v @ rbm.b)[:, None] - (h @ rbm.c)[None, :] - v @ rbm.W @ h.T


def _log_partition(rbm):
    vs = _binary_states(rbm.n_visible)
    hs = _binary_states(rbm.n_hidden)
    return logsumexp(-energy(rbm, vs, hs)), vs, hs


def visible_log_probs(rbm: Rbm):
    """``log p(v)`` for all ``2^V`` visible states (enumeration over the joint)."""
    if rbm.visible_type != "bernoulli":
        raise ParameterError("exact likelihood requires binary visible units")
    _check_enumerable(rbm.n_visible + rbm.n_hidden)
    log_z, vs, hs = _log_partition(rbm)
    return vs, logsumexp(-energy(rbm, vs, hs), axis=1) - log_z


def rbm_exact_loglik(rbm: Rbm, dataset) -> float:
    """``sum_i log p(v_i)`` by brute-force enumeration of the partition sum."""
    if rbm.visible_type != "bernoulli":
        raise ParameterError("exact likelihood requires binary visible units")
    _check_enumerable(rbm.n_visible + rbm.n_hidden)
    data = np.atleast_2d(np.asarray(dataset, dtype=np.float64))
    log_z, _, hs = _log_partition(rbm)
    return float(np.sum(logsumexp(-energy(rbm, data, hs), axis=1) - log_z))


def rbm_exact_gradient(rbm: Rbm, dataset):
    """Exact mean log-likelihood gradient: data term minus model term, by enumeration."""
    vs, logp = visible_log_probs(rbm)
    data = np.atleast_2d(np.asarray(dataset, dtype=np.float64))
    pv = np.exp(logp)
    ph_data = hidden_given_visible(rbm, data)
    ph_model = hidden_given_visible(rbm, vs)
    n = data.shape[0]
    dw = data.T @ ph_data / n - (vs * pv[:, None]).T @ ph_model
    db = data.mean(axis=0) - pv @ vs
    dc = ph_data.mean(axis=0) - pv @ ph_model
    return dw, db, dc


def reconstruction_error(rbm: Rbm, data) -> float:
    """Mean squared difference between data and its one-step mean-field reconstruction."""
    data = np.atleast_2d(data)
    recon = visible_given_hidden(rbm, hidden_given_visible(rbm, data))
    return float(np.mean((data - recon) ** 2))


def train_rbm(rbm: Rbm, data, epochs, rate, rng, batch_size=32) -> Rbm:
    data = np.atleast_2d(np.asarray(data, dtype=np.float64))
    for _ in range(epochs):
        order = rng.permutation(data.shape[0])
        for start in range(0, data.shape[0], batch_size):
            rbm = cd1_update(rbm, data[order[start:start + batch_size]], rate, rng)
    return rbm


class DbnStack:
    """Greedily pretrained RBMs with an optional softmax head.

    Inputs are standardized with the stored mean/std before the first
    (Gaussian-visible) layer.
    """

    blob_kind = "network"

    def __init__(self, rbms, head=None, input_mean=None, input_std=None):
        self.rbms = list(rbms)
        for lower, upper in zip(self.rbms, self.rbms[1:]):
            if lower.n_hidden != upper.n_visible:
                raise ParameterError("RBM stack dimensions are not chain-consistent")
        self.head = head
        n_in = self.rbms[0].n_visible
        self.input_mean = np.zeros(n_in) if input_mean is None else np.asarray(input_mean, float)
        self.input_std = np.ones(n_in) if input_std is None else np.asarray(input_std, float)

    @property
    def topology(self):
        return [self.rbms[0].n_visible] + [r.n_hidden for r in self.rbms]

    def standardize(self, x):
        return (np.asarray(x, dtype=np.float64) - self.input_mean) / self.input_std

    def to_network(self, include_head=True) -> LayeredNetwork:
        layers = [Dense(r.W.T.copy(), r.c.copy(), "sigmoid") for r in self.rbms]
        if include_head and self.head is not None:
            layers.append(Dense(self.head.weight.copy(), self.head.bias.copy(), "softmax"))
        return LayeredNetwork(layers, (self.rbms[0].n_visible,))

    def transform(self, x):
        """Top hidden-layer activation probabilities (the DBN feature)."""
        net = self.to_network(include_head=False)
        return forward(net, self.standardize(np.atleast_2d(x)))[-1]

    def predict_proba(self, x):
        return forward(self.to_network(), self.standardize(np.atleast_2d(x)))[-1]

    def to_state(self):
        meta = {"dbn": True, "n_rbms": len(self.rbms),
                "visible_types": [r.visible_type for r in self.rbms],
                "has_head": self.head is not None}
        arrays = {"input_mean": self.input_mean, "input_std": self.input_std}
        for i, r in enumerate(self.rbms):
            arrays[f"rbm{i:03d}.W"] = r.W
            arrays[f"rbm{i:03d}.b"] = r.b
            arrays[f"rbm{i:03d}.c"] = r.c
        if self.head is not None:
            arrays["head.W"] = self.head.weight
            arrays["head.b"] = self.head.bias
        return meta, arrays

    @classmethod
    def from_state(cls, meta, arrays):
        rbms = [Rbm(arrays[f"rbm{i:03d}.W"], arrays[f"rbm{i:03d}.b"], arrays[f"rbm{i:03d}.c"],
                    meta["visible_types"][i]) for i in range(meta["n_rbms"])]
        head = Dense(arrays["head.W"], arrays["head.b"], "softmax") if meta["has_head"] else None
        return cls(rbms, head, arrays["input_mean"], arrays["input_std"])

    def copy(self):
        return DbnStack.from_state(*self.to_state())


def pretrain_stack(data, topology, epochs=10, rate=0.01, seed=0, batch_size=32,
                   layer_errors=None) -> DbnStack:
    """Greedy layer-wise CD-1 pretraining.

    The bottom RBM is Gaussian-Bernoulli on standardized inputs; every later
    RBM is Bernoulli-Bernoulli and trained on the hidden activation
    probabilities of the layer below. ``layer_errors`` receives
    ``(before, after)`` reconstruction errors per layer.
    """
    x = np.atleast_2d(np.asarray(data, dtype=np.float64))
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    h = (x - mean) / std
    rng = np.random.default_rng(seed)
    rbms = []
    sizes = [x.shape[1]] + list(topology)
    for i, (n_v, n_h) in enumerate(zip(sizes[:-1], sizes[1:])):
        rbm = Rbm.init(n_v, n_h, "gaussian" if i == 0 else "bernoulli",
                       seed=int(rng.integers(2 ** 31)))
        before = reconstruction_error(rbm, h)
        rbm = train_rbm(rbm, h, epochs, rate, rng, batch_size)
        if layer_errors is not None:
            layer_errors.append((before, reconstruction_error(rbm, h)))
        rbms.append(rbm)
        h = hidden_given_visible(rbm, h)
    return DbnStack(rbms, None, mean, std)


def finetune(stack: DbnStack, data, labels, optimizer: OptimizerState | None = None, epochs=10,
             batch_size=32, seed=0, n_classes=None, curve=None) -> DbnStack:
    """Supervised cross-entropy tuning of the unrolled stack plus a softmax head."""
    labels = np.asarray(labels)
    y = labels if labels.ndim == 2 else np.eye(n_classes or int(labels.max()) + 1)[labels]
    stack = stack.copy()
    rng = np.random.default_rng(seed)
    if stack.head is None:
        stack.head = Dense.init(stack.rbms[-1].n_hidden, y.shape[1], "softmax", rng)
    if stack.head.n_out != y.shape[1]:
        raise ParameterError("label width does not match the softmax head")
    net = stack.to_network()
    optimizer = optimizer or OptimizerState("sgd", rate=0.1)
    train(net, stack.standardize(data), y, optimizer, epochs, batch_size, "cross_entropy",
          None, int(rng.integers(2 ** 31)), curve)
    for rbm, layer in zip(stack.rbms, net.layers):
        rbm.W = layer.weight.T.copy()
        rbm.c = layer.bias.copy()
    stack.head = net.layers[-1]
    return stack
