"""Diagonal-covariance Gaussian mixtures: EM training, MAP adaptation, LLR scoring."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import ParameterError

log = logging.getLogger(__name__)

LOG_2PI = np.log(2.0 * np.pi)


@dataclass
class GmmModel:
    weights: np.ndarray  # (M,)
    means: np.ndarray  # (M, K)
    variances: np.ndarray  # (M, K)
    var_floor: np.ndarray = None  # (K,)

    blob_kind = "gmm"

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64).ravel()
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        self.variances = np.atleast_2d(np.asarray(self.variances, dtype=np.float64))
        if self.var_floor is None:
            self.var_floor = np.zeros(self.means.shape[1])
        self.var_floor = np.asarray(self.var_floor, dtype=np.float64).ravel()
        m, k = self.means.shape
        if self.weights.shape != (m,) or self.variances.shape != (m, k):
            raise ParameterError("inconsistent GMM parameter shapes")
        if abs(self.weights.sum() - 1.0) > 1e-9:
            raise ParameterError("mixture weights must sum to 1")
        if np.any(self.variances <= 0):
            raise ParameterError("variances must be positive")

    @property
    def n_components(self):
        return self.means.shape[0]

    @property
    def dim(self):
        return self.means.shape[1]

    def to_state(self):
        return {}, {"weights": self.weights, "means": self.means,
                    "variances": self.variances, "var_floor": self.var_floor}

    @classmethod
    def from_state(cls, meta, arrays):
        return cls(arrays["weights"], arrays["means"], arrays["variances"], arrays["var_floor"])

    def copy(self):
        return GmmModel(self.weights.copy(), self.means.copy(), self.variances.copy(),
                        self.var_floor.copy())


@dataclass
class AdaptationConfig:
    relevance_factor: float = 16.0
    adapt_weights: bool = True
    adapt_means: bool = True
    adapt_variances: bool = True

    def __post_init__(self):
        if not self.relevance_factor > 0:
            raise ParameterError("relevance_factor must be positive")


def _as_frames(x, dim):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[1] != dim:
        raise ParameterError(f"feature dimension {x.shape[1]} != model dimension {dim}")
    return x


def weighted_log_densities(x, gmm: GmmModel) -> np.ndarray:
    """``log(w_i b_i(x))`` for every frame and component, shape (n, M)."""
    x = _as_frames(x, gmm.dim)
    prec = 1.0 / gmm.variances
    log_det = np.sum(np.log(gmm.variances), axis=1)
    maha = np.empty((x.shape[0], gmm.n_components))
    for start in range(0, x.shape[0], 2048):
        diff = x[start:start + 2048, None, :] - gmm.means[None, :, :]
        maha[start:start + 2048] = np.einsum("nmk,mk->nm", diff * diff, prec)
    return np.log(gmm.weights) - 0.5 * (gmm.dim * LOG_2PI + log_det + maha)


def frame_log_likelihoods(x, gmm: GmmModel) -> np.ndarray:
    return logsumexp(weighted_log_densities(x, gmm), axis=1)


def gmm_log_likelihood(x, gmm: GmmModel) -> float:
    """Log density of a single vector (or the summed log density of a frame matrix)."""
    return float(np.sum(frame_log_likelihoods(x, gmm)))


def component_posteriors(x, gmm: GmmModel) -> np.ndarray:
    """Responsibilities ``p(i|x)``; a vector for one frame, (n, M) for a frame matrix."""
    single = np.asarray(x).ndim == 1
    lp = weighted_log_densities(x, gmm)
    post = np.exp(lp - logsumexp(lp, axis=1, keepdims=True))
    return post[0] if single else post


def _variance_floor(data, ratio):
    return ratio * np.maximum(data.var(axis=0), np.finfo(float).tiny)


def train_gmm_em(data, n_components: int, iters: int = 20, seed: int = 0,
                 floor_ratio: float = 1e-4, history: list | None = None) -> GmmModel:
    """Maximum-likelihood mixture by EM.

    Means start at randomly chosen distinct frames, variances at the global
    variance and weights uniform. ``history`` (if given) receives the total
    log-likelihood before the first update and after every iteration.
    """
    x = np.asarray(data, dtype=np.float64)
    if x.ndim != 2:
        raise ParameterError("training data must be a frame matrix")
    distinct = np.unique(x, axis=0)
    if n_components < 1 or n_components > distinct.shape[0]:
        raise ParameterError(f"{n_components} components need at least as many distinct frames")
    rng = np.random.default_rng(seed)
    floor = _variance_floor(x, floor_ratio)
    pick = np.sort(rng.choice(distinct.shape[0], n_components, replace=False))
    means = distinct[pick].copy()
    variances = np.tile(np.maximum(x.var(axis=0), floor), (n_components, 1))
    model = GmmModel(np.full(n_components, 1.0 / n_components), means, variances, floor)

    for it in range(iters):
        lp = weighted_log_densities(x, model)
        frame_ll = logsumexp(lp, axis=1)
        if history is not None and it == 0:
            history.append(float(frame_ll.sum()))
        post = np.exp(lp - frame_ll[:, None])
        model = _m_step(x, post, frame_ll, floor)
        if history is not None:
            history.append(gmm_log_likelihood(x, model))
    return model


def _m_step(x, post, frame_ll, floor):
    counts = post.sum(axis=0)
    empty = counts < 1e-6
    if np.any(empty):
        # re-seed starved components at the worst-explained frames
        worst = np.argsort(frame_ll, kind="stable")[: int(empty.sum())]
        log.warning("re-seeding %d empty mixture components", int(empty.sum()))
        post = post.copy()
        post[:, empty] = 0.0
        post[worst, np.flatnonzero(empty)] = 1.0
        counts = post.sum(axis=0)
    means = (post.T @ x) / counts[:, None]
    variances = np.empty_like(means)
    for i in range(means.shape[0]):
        variances[i] = post[:, i] @ (x - means[i]) ** 2 / counts[i]
    variances = np.maximum(variances, floor)
    weights = counts / counts.sum()
    return GmmModel(weights, means, variances, floor)


def map_adapt(ubm: GmmModel, data, cfg: AdaptationConfig | None = None) -> GmmModel:
    """MAP-adapt the UBM toward ``data`` with relevance-factor coefficients.

    ``a_i = n_i / (n_i + r)`` with ``n_i`` the soft count of component ``i``.
    The adapted weights are renormalized to sum to one.
    """
    cfg = cfg or AdaptationConfig()
    x = np.asarray(data, dtype=np.float64)
    if x.size == 0:
        return ubm.copy()
    x = _as_frames(x, ubm.dim)
    n_frames = x.shape[0]
    post = component_posteriors(x, ubm)
    if post.ndim == 1:
        post = post[None, :]
    counts = post.sum(axis=0)
    safe = np.where(counts > 0, counts, 1.0)[:, None]
    e1 = (post.T @ x) / safe
    e2 = (post.T @ (x * x)) / safe
    alpha = (counts / (counts + cfg.relevance_factor))[:, None]
    zero = np.zeros_like(alpha)
    a_w = alpha[:, 0] if cfg.adapt_weights else zero[:, 0]
    a_m = alpha if cfg.adapt_means else zero
    a_v = alpha if cfg.adapt_variances else zero

    w = a_w * counts / n_frames + (1.0 - a_w) * ubm.weights
    w = w / w.sum()
    mu = a_m * e1 + (1.0 - a_m) * ubm.means
    var = a_v * e2 + (1.0 - a_v) * (ubm.variances + ubm.means ** 2) - mu ** 2
    var = np.maximum(var, np.maximum(ubm.var_floor, np.finfo(float).tiny))
    return GmmModel(w, mu, var, ubm.var_floor.copy())


def llr_score(features, target: GmmModel, ubm: GmmModel) -> float:
    """Frame-averaged ``log p(X|target) - log p(X|ubm)``."""
    x = np.asarray(features, dtype=np.float64)
    if x.size == 0:
        raise ParameterError("cannot score an empty feature matrix")
    x = _as_frames(x, ubm.dim)
    if target.dim != ubm.dim:
        raise ParameterError("target and UBM dimensions differ")
    return float(np.mean(frame_log_likelihoods(x, target) - frame_log_likelihoods(x, ubm)))
