"""Baum-Welch statistics, total-variability training and i-vector extraction."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ParameterError
from .gmm import GmmModel, component_posteriors

log = logging.getLogger(__name__)


@dataclass
class BaumWelchStats:
    zero: np.ndarray  # (M,) soft counts
    first: np.ndarray  # (M*K,) centered first-order stats, stacked per component

    def __add__(self, other):
        return BaumWelchStats(self.zero + other.zero, self.first + other.first)

    @property
    def n_components(self):
        return self.zero.size

    @property
    def dim(self):
        return self.first.size // self.zero.size

    def expanded_counts(self):
        """Diagonal of the (M*K) x (M*K) count matrix."""
        return np.repeat(self.zero, self.dim)


@dataclass
class TotalVariabilitySpace:
    T: np.ndarray  # (M*K, R)
    sigma: np.ndarray  # (M*K,) UBM variances, stacked
    mean: np.ndarray  # (M*K,) UBM mean supervector
    n_components: int

    blob_kind = "tv"

    def __post_init__(self):
        self.T = np.asarray(self.T, dtype=np.float64)
        if self.T.ndim != 2 or self.T.shape[0] != self.sigma.size:
            raise ParameterError("T must have one row per supervector entry")
        if np.any(self.sigma <= 0):
            raise ParameterError("sigma must be positive")

    @property
    def rank(self):
        return self.T.shape[1]

    def to_state(self):
        return ({"n_components": int(self.n_components)},
                {"T": self.T, "sigma": self.sigma, "mean": self.mean})

    @classmethod
    def from_state(cls, meta, arrays):
        return cls(arrays["T"], arrays["sigma"], arrays["mean"], meta["n_components"])


def accumulate_stats(features, ubm: GmmModel) -> BaumWelchStats:
    """Zero-order counts and UBM-centered first-order statistics of an utterance."""
    x = np.asarray(features, dtype=np.float64)
    if x.size == 0:
        return BaumWelchStats(np.zeros(ubm.n_components), np.zeros(ubm.n_components * ubm.dim))
    x = np.atleast_2d(x)
    post = component_posteriors(x, ubm)
    if post.ndim == 1:
        post = post[None, :]
    n = post.sum(axis=0)
    f = post.T @ x - n[:, None] * ubm.means
    return BaumWelchStats(n, f.ravel())


def posterior_factor(stats: BaumWelchStats, tv: TotalVariabilitySpace):
    """Precision ``I + T' S^-1 N T`` and mean of the latent factor for one utterance."""
    weighted = tv.T / tv.sigma[:, None]
    nn = stats.expanded_counts()
    precision = np.eye(tv.rank) + weighted.T @ (tv.T * nn[:, None])
    mean = np.linalg.solve(precision, weighted.T @ stats.first)
    return precision, mean


def extract_ivector(stats: BaumWelchStats, tv: TotalVariabilitySpace) -> np.ndarray:
    if stats.first.size != tv.T.shape[0]:
        raise ParameterError("statistics do not match the total-variability space")
    return posterior_factor(stats, tv)[1]


def tv_log_likelihood(stats_list, tv: TotalVariabilitySpace) -> float:
    """EM objective up to T-independent constants: ``sum_s 1/2 b'L^-1 b - 1/2 log|L|``."""
    total = 0.0
    for st in stats_list:
        prec, mean = posterior_factor(st, tv)
        b = (tv.T / tv.sigma[:, None]).T @ st.first
        total += 0.5 * b @ mean - 0.5 * np.linalg.slogdet(prec)[1]
    return float(total)


def tv_reconstruction_error(stats_list, tv: TotalVariabilitySpace) -> float:
    """``sum_s r' (S N)^-1 r`` with ``r = F - N T y``, skipping entries with zero count."""
    total = 0.0
    for st in stats_list:
        _, y = posterior_factor(st, tv)
        nn = st.expanded_counts()
        r = st.first - nn * (tv.T @ y)
        ok = nn > 0
        total += float(np.sum(r[ok] ** 2 / (tv.sigma[ok] * nn[ok])))
    return total


def train_tv_em(stats_list, ubm: GmmModel, rank: int, iters: int = 10, seed: int = 0,
                paper_literal: bool = False, history: list | None = None) -> TotalVariabilitySpace:
    """Estimate the total-variability matrix by EM with the UBM covariance held fixed.

    The M-step normal matrix is ``A_c = sum_s N_c(s) (L_s^-1 + y_s y_s')``;
    ``paper_literal=True`` drops the second-moment term.
    """
    stats_list = list(stats_list)
    m, k = ubm.n_components, ubm.dim
    if rank < 1 or rank >= m * k:
        raise ParameterError("rank must satisfy 1 <= R < M*K")
    if iters < 1:
        raise ParameterError("iters must be >= 1")
    if len(stats_list) < rank:
        warnings.warn(f"only {len(stats_list)} utterances for rank {rank}", stacklevel=2)
    rng = np.random.default_rng(seed)
    sigma = ubm.variances.ravel().copy()
    tv = TotalVariabilitySpace(rng.uniform(-0.001, 0.001, size=(m * k, rank)), sigma,
                               ubm.means.ravel().copy(), m)
    zeros = np.array([st.zero for st in stats_list])  # (S, M)
    firsts = np.array([st.first for st in stats_list])  # (S, M*K)
    if history is not None:
        history.append(tv_log_likelihood(stats_list, tv))

    for _ in range(iters):
        a = np.zeros((m, rank, rank))
        c = np.zeros((m * k, rank))
        for s, st in enumerate(stats_list):
            prec, y = posterior_factor(st, tv)
            cov = np.linalg.inv(prec)
            second = cov if paper_literal else cov + np.outer(y, y)
            a += zeros[s][:, None, None] * second[None, :, :]
            c += np.outer(firsts[s], y)
        new_t = np.empty_like(tv.T)
        for comp in range(m):
            rows = slice(comp * k, (comp + 1) * k)
            new_t[rows] = _solve_rows(a[comp], c[rows])
        tv = TotalVariabilitySpace(new_t, sigma, tv.mean, m)
        if history is not None:
            history.append(tv_log_likelihood(stats_list, tv))
    return tv


def _solve_rows(a, c_rows):
    """``(A^-1 C_c')'`` with a ridge fallback when ``A`` is singular."""
    try:
        cond = np.linalg.cond(a)
    except np.linalg.LinAlgError:
        cond = np.inf
    if not np.isfinite(cond) or cond > 1e12:
        ridge = 1e-6 * max(np.trace(a) / a.shape[0], 1.0)
        warnings.warn("singular M-step system; adding ridge", RuntimeWarning, stacklevel=3)
        a = a + ridge * np.eye(a.shape[0])
    return np.linalg.solve(a, c_rows.T).T
