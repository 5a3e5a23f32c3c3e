"""Perceptual linear prediction.

Pipeline per frame: Bark-warped critical-band integration, equal-loudness
weighting, cube-root-like intensity-to-loudness compression, inverse DFT to
an autocorrelation sequence and an all-pole fit by Levinson-Durbin.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dsp import apply_hamming, frame_signal, power_spectrum, pre_emphasize
from .errors import ParameterError, SingularityError
from .mfcc import AcousticFeatureSequence

POWER_FLOOR = 1e-10


@dataclass
class BarkSpectrum:
    values: np.ndarray
    bark_centers: np.ndarray
    angular_freqs: np.ndarray  # rad/s of each center


@dataclass
class AllPoleModel:
    """``1 / (1 + sum_i a_i z^-i)`` with prediction-error energy ``gain``."""

    coefficients: np.ndarray
    gain: float
    reflection: np.ndarray

    @property
    def order(self):
        return self.coefficients.size


def bark_warp(w):
    """Angular frequency (rad/s) to Bark: ``6 ln(x + sqrt(x^2 + 1))``, ``x = w/1200pi``."""
    w = np.asarray(w, dtype=np.float64)
    if np.any(w < 0):
        raise ParameterError("angular frequency must be non-negative")
    x = w / (1200.0 * np.pi)
    out = 6.0 * np.log(x + np.sqrt(x * x + 1.0))
    return float(out) if out.ndim == 0 else out


def bark_unwarp(omega):
    out = 1200.0 * np.pi * np.sinh(np.asarray(omega, dtype=np.float64) / 6.0)
    return float(out) if out.ndim == 0 else out


def critical_band_mask(omega):
    """Piecewise critical-band masking curve, offset ``omega`` in Bark."""
    o = np.asarray(omega, dtype=np.float64)
    out = np.zeros_like(o)
    lo = (o >= -1.3) & (o <= -0.5)
    flat = (o > -0.5) & (o < 0.5)
    hi = (o >= 0.5) & (o <= 2.5)
    out[lo] = 10.0 ** (2.5 * (o[lo] + 0.5))
    out[flat] = 1.0
    out[hi] = 10.0 ** (0.5 - o[hi])
    return float(out) if out.ndim == 0 else out


def critical_band_spectrum(power_row, sample_rate: int) -> BarkSpectrum:
    """Convolve the Bark-warped power spectrum with the masking curve.

    Band centers sit at integer Bark values from 0 up to the Bark value of
    the Nyquist frequency.
    """
    p = np.asarray(power_row, dtype=np.float64)
    if p.ndim != 1 or p.size < 2:
        raise ParameterError("need a non-empty one-sided power spectrum row")
    fft_size = 2 * (p.size - 1)
    w_bins = 2.0 * np.pi * np.arange(p.size) * sample_rate / fft_size
    bark_bins = bark_warp(w_bins)
    top = bark_warp(np.pi * sample_rate)
    centers = np.arange(0.0, np.floor(top) + 1.0)
    mask = critical_band_mask(bark_bins[None, :] - centers[:, None])
    return BarkSpectrum(mask @ p, centers, bark_unwarp(centers))


def equal_loudness_weight(w):
    """Approximate 40 dB equal-loudness sensitivity at angular frequency ``w``."""
    w = np.asarray(w, dtype=np.float64)
    w2 = w * w
    num = (w2 + 56.8e6) * w2 * w2
    den = (w2 + 6.3e6) ** 2 * (w2 + 0.38e9) * (w2 ** 3 + 9.58e26)
    out = num / den
    return float(out) if out.ndim == 0 else out


def equal_loudness(bark: BarkSpectrum) -> BarkSpectrum:
    return BarkSpectrum(bark.values * equal_loudness_weight(bark.angular_freqs),
                        bark.bark_centers, bark.angular_freqs)


def intensity_to_loudness(bark: BarkSpectrum) -> BarkSpectrum:
    if np.any(bark.values < 0):
        raise ParameterError("intensities must be non-negative")
    return BarkSpectrum(bark.values ** 0.33, bark.bark_centers, bark.angular_freqs)


def loudness_autocorrelation(values, n_lags: int) -> np.ndarray:
    """Autocorrelation lags ``0..n_lags-1`` from the mirrored (even) loudness spectrum."""
    r = np.fft.irfft(np.asarray(values, dtype=np.float64))
    if r.size < n_lags:
        raise ParameterError(f"only {r.size} lags available, {n_lags} requested")
    return r[:n_lags]


def levinson_durbin(r, order: int) -> AllPoleModel:
    """Solve the Yule-Walker equations ``R a = -r[1:]`` by the order recursion."""
    r = np.asarray(r, dtype=np.float64)
    if order < 1:
        raise ParameterError("order must be >= 1")
    if r.size < order + 1:
        raise ParameterError(f"need {order + 1} autocorrelation lags, got {r.size}")
    if not r[0] > 0:
        raise SingularityError("r(0) must be positive")
    a = np.zeros(order)
    ks = np.zeros(order)
    err = r[0]
    for i in range(order):
        acc = r[i + 1] + np.dot(a[:i], r[i:0:-1])
        k = -acc / err
        a[:i] = a[:i] + k * a[:i][::-1]
        a[i] = k
        ks[i] = k
        err = err * (1.0 - k * k)
        if not err > 0:
            raise SingularityError(f"non-positive prediction error at order {i + 1}")
    return AllPoleModel(a, float(err), ks)


def plp_features(power_row, sample_rate: int, order: int = 12) -> np.ndarray:
    """PLP vector ``[a_1..a_p, gain]`` (``p + 1`` values) for one power-spectrum row."""
    p = np.maximum(np.asarray(power_row, dtype=np.float64), POWER_FLOOR)
    bands = critical_band_spectrum(p, sample_rate)
    loud = intensity_to_loudness(equal_loudness(bands))
    r = loudness_autocorrelation(loud.values, order + 1)
    model = levinson_durbin(r, order)
    return np.append(model.coefficients, model.gain)


def extract_plp(audio, frame_ms=25.0, hop_ms=20.0, pre_emphasis=0.95, order=12,
                fft_size=None, literal_window=False):
    """Frame-level PLP track for one utterance, shape ``(F, order + 1)``."""
    frames = frame_signal(pre_emphasize(audio, pre_emphasis), frame_ms, hop_ms)
    spec = power_spectrum(apply_hamming(frames, literal_window), fft_size)
    rows = [plp_features(row, audio.sample_rate, order) for row in spec.spectra]
    return AcousticFeatureSequence(np.array(rows), "plp", frame_ms, hop_ms)
