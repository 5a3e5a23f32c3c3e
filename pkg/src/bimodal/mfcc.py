"""Mel-frequency cepstral coefficients with energy and dynamic features."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dsp import (
    FrameMatrix,
    PowerSpectrumMatrix,
    apply_hamming,
    frame_signal,
    power_spectrum,
    pre_emphasize,
)
from .errors import InsufficientDataError, ParameterError, ResolutionError

LOG_FLOOR = 1e-10


@dataclass
class MelFilterbank:
    weights: np.ndarray  # (L, K/2 + 1)
    lower: np.ndarray
    centers: np.ndarray
    upper: np.ndarray
    fft_size: int
    sample_rate: int

    @property
    def n_filters(self):
        return self.weights.shape[0]


@dataclass
class AcousticFeatureSequence:
    vectors: np.ndarray  # (F, D)
    kind: str
    frame_ms: float
    hop_ms: float

    def __post_init__(self):
        self.vectors = np.atleast_2d(np.asarray(self.vectors, dtype=np.float64))
        if not np.all(np.isfinite(self.vectors)):
            raise ParameterError("feature vectors must be finite")

    @property
    def dim(self):
        return self.vectors.shape[1]

    @property
    def n_frames(self):
        return self.vectors.shape[0]


def hz_to_mel(f):
    f = np.asarray(f, dtype=np.float64)
    if np.any(f < 0):
        raise ParameterError("frequency must be non-negative")
    out = 2595.0 * np.log10(1.0 + f / 700.0)
    return float(out) if out.ndim == 0 else out


def mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    out = 700.0 * (10.0 ** (m / 2595.0) - 1.0)
    return float(out) if out.ndim == 0 else out


def mel_boundaries(n_filters, f_low, f_high):
    """The ``L + 2`` filter edge frequencies, equally spaced on the mel scale."""
    return mel_to_hz(np.linspace(hz_to_mel(f_low), hz_to_mel(f_high), n_filters + 2))


def build_filterbank(n_filters: int, fft_size: int, sample_rate: int,
                     f_low: float = 0.0, f_high: float | None = None) -> MelFilterbank:
    """Triangular mel filters; filter ``l`` rises from ``o(l)`` to ``c(l)`` and falls to ``h(l)``.

    Adjacent filters share edges: ``c(l) == h(l-1) == o(l+1)``.
    """
    if f_high is None:
        f_high = sample_rate / 2.0
    if n_filters < 2:
        raise ParameterError("need at least two filters")
    if not 0 <= f_low < f_high <= sample_rate / 2.0:
        raise ParameterError("need 0 <= f_low < f_high <= sample_rate/2")
    edges_hz = mel_boundaries(n_filters, f_low, f_high)
    bins = np.round(edges_hz * fft_size / sample_rate).astype(int)
    if np.any(np.diff(bins) <= 0):
        raise ResolutionError(
            f"fft_size {fft_size} too small to separate {n_filters} mel filters")
    n_bins = fft_size // 2 + 1
    k = np.arange(n_bins)
    lower, centers, upper = bins[:-2], bins[1:-1], bins[2:]
    weights = np.zeros((n_filters, n_bins))
    for l, (o, c, h) in enumerate(zip(lower, centers, upper)):
        rise = (k >= o) & (k <= c)
        fall = (k >= c) & (k <= h)
        weights[l, rise] = (k[rise] - o) / (c - o)
        weights[l, fall] = (h - k[fall]) / (h - c)
    return MelFilterbank(weights, lower, centers, upper, fft_size, sample_rate)


def dct_matrix(n_ceps, n_filters):
    """Rows ``i = 1..n_ceps`` of ``sqrt(2/L) cos((l - 1/2) i pi / L)``."""
    i = np.arange(1, n_ceps + 1)[:, None]
    l = np.arange(1, n_filters + 1)[None, :]
    return np.sqrt(2.0 / n_filters) * np.cos((l - 0.5) * i * np.pi / n_filters)


def filterbank_energies(spectrum: PowerSpectrumMatrix, bank: MelFilterbank,
                        domain: str = "magnitude") -> np.ndarray:
    if bank.fft_size != spectrum.fft_size:
        raise ParameterError("filterbank built for a different fft_size")
    if domain == "magnitude":
        x = np.sqrt(spectrum.spectra)
    elif domain == "power":
        x = spectrum.spectra
    else:
        raise ParameterError(f"unknown filtering domain {domain!r}")
    return x @ bank.weights.T


def mfcc_from_power(spectrum: PowerSpectrumMatrix, bank: MelFilterbank, n_ceps: int = 13,
                    domain: str = "magnitude", frame_ms=None, hop_ms=None) -> AcousticFeatureSequence:
    """Cepstral coefficients ``c(1..n_ceps)`` of the log mel filter outputs.

    Filters act on the magnitude spectrum by default (``domain="power"`` to
    filter the power spectrum). Filter outputs below 1e-10 are floored
    before the base-10 log.
    """
    if n_ceps > bank.n_filters:
        raise ParameterError("n_ceps cannot exceed the filter count")
    m = filterbank_energies(spectrum, bank, domain)
    logm = np.log10(np.maximum(m, LOG_FLOOR))
    ceps = logm @ dct_matrix(n_ceps, bank.n_filters).T
    return AcousticFeatureSequence(ceps, "mfcc", frame_ms, hop_ms)


def deltas(track: np.ndarray, k_delta: int = 2) -> np.ndarray:
    """Regression deltas along axis 0 with forward/backward differences at the edges."""
    c = np.asarray(track, dtype=np.float64)
    t_len = c.shape[0]
    if k_delta not in (1, 2):
        raise ParameterError("delta window must be 1 or 2")
    if t_len < 2 * k_delta + 1:
        raise InsufficientDataError(f"need at least {2 * k_delta + 1} frames for deltas")
    d = np.empty_like(c)
    norm = np.sqrt(2.0 * sum(k * k for k in range(1, k_delta + 1)))
    mid = slice(k_delta, t_len - k_delta)
    acc = np.zeros_like(c[mid])
    for k in range(1, k_delta + 1):
        acc += k * (c[k_delta + k:t_len - k_delta + k] - c[k_delta - k:t_len - k_delta - k])
    d[mid] = acc / norm
    d[:k_delta] = c[1:k_delta + 1] - c[:k_delta]
    d[t_len - k_delta:] = c[t_len - k_delta:] - c[t_len - k_delta - 1:t_len - 1]
    return d


def frame_log_energy(frames: FrameMatrix) -> np.ndarray:
    return np.log(np.maximum(np.sum(frames.frames ** 2, axis=1), LOG_FLOOR))


def append_deltas_and_energy(features: AcousticFeatureSequence, frames: FrameMatrix,
                             k_delta: int = 2) -> AcousticFeatureSequence:
    """Stack ``[c, delta c, delta-delta c, log energy]`` per frame (``3*L + 1`` columns)."""
    if features.n_frames != frames.n_frames:
        raise ParameterError("feature and frame counts differ")
    c = features.vectors
    d1 = deltas(c, k_delta)
    d2 = deltas(d1, k_delta)
    energy = frame_log_energy(frames)[:, None]
    return AcousticFeatureSequence(np.hstack([c, d1, d2, energy]), "mfcc_full",
                                   features.frame_ms, features.hop_ms)


def extract_mfcc(audio, frame_ms=25.0, hop_ms=20.0, pre_emphasis=0.95, n_filters=24,
                 n_ceps=13, k_delta=2, fft_size=None, domain="magnitude",
                 literal_window=False) -> AcousticFeatureSequence:
    """Full MFCC front end for one utterance."""
    emphasized = pre_emphasize(audio, pre_emphasis)
    frames = frame_signal(emphasized, frame_ms, hop_ms)
    spec = power_spectrum(apply_hamming(frames, literal_window), fft_size)
    bank = build_filterbank(n_filters, spec.fft_size, audio.sample_rate)
    ceps = mfcc_from_power(spec, bank, n_ceps, domain, frame_ms, hop_ms)
    return append_deltas_and_energy(ceps, frames, k_delta)
