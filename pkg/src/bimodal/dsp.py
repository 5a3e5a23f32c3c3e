"""Short-time analysis front end: pre-emphasis, framing, windowing, power spectra."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InsufficientDataError, ParameterError
from .io import AudioBuffer


@dataclass
class FrameMatrix:
    frames: np.ndarray  # (F, N)
    frame_ms: float
    hop_ms: float
    sample_rate: int

    @property
    def n_frames(self):
        return self.frames.shape[0]

    @property
    def frame_length(self):
        return self.frames.shape[1]


@dataclass
class PowerSpectrumMatrix:
    spectra: np.ndarray  # (F, K/2 + 1)
    fft_size: int
    sample_rate: int


def pre_emphasize(audio: AudioBuffer, a: float = 0.95) -> AudioBuffer:
    """First-order high-pass ``s'(n) = s(n) - a*s(n-1)`` with ``s'(0) = s(0)``."""
    if not 0.0 <= a <= 1.0:
        raise ParameterError(f"pre-emphasis coefficient {a} outside [0, 1]")
    if len(audio) == 0:
        raise InsufficientDataError("empty audio")
    s = audio.samples
    out = s.copy()
    out[1:] = s[1:] - a * s[:-1]
    return AudioBuffer(out, audio.sample_rate)


def de_emphasize(samples, a: float):
    """Inverse of :func:`pre_emphasize` (recursive, exact up to rounding)."""
    out = np.empty_like(np.asarray(samples, dtype=np.float64))
    acc = 0.0
    for n, v in enumerate(samples):
        acc = v + a * acc if n else v
        out[n] = acc
    return out


def frame_params(frame_ms, hop_ms, sample_rate):
    n = int(round(frame_ms * sample_rate / 1000.0))
    h = int(round(hop_ms * sample_rate / 1000.0))
    return n, h


def frame_signal(audio: AudioBuffer, frame_ms: float = 25.0, hop_ms: float = 20.0) -> FrameMatrix:
    """Cut the signal into overlapping frames; the trailing partial frame is dropped."""
    if not frame_ms > hop_ms > 0:
        raise ParameterError("need frame_ms > hop_ms > 0")
    n, h = frame_params(frame_ms, hop_ms, audio.sample_rate)
    if n < 1 or h < 1:
        raise ParameterError("frame or hop shorter than one sample")
    length = len(audio)
    if length < n:
        raise InsufficientDataError(f"audio has {length} samples, frame needs {n}")
    count = (length - n) // h + 1
    idx = np.arange(count)[:, None] * h + np.arange(n)[None, :]
    return FrameMatrix(audio.samples[idx], frame_ms, hop_ms, audio.sample_rate)


def hamming_window(n: int, literal: bool = False) -> np.ndarray:
    """Hamming window of length ``n``.

    ``literal=True`` evaluates the plus-sign variant ``0.54 + 0.46*cos(2*pi*k/(n-1))``,
    which peaks at the frame edges; the default is the textbook
    ``0.54 - 0.46*cos(...)``.
    """
    if n < 2:
        raise ParameterError("window length must be >= 2")
    k = np.arange(n)
    c = np.cos(2.0 * np.pi * k / (n - 1))
    return 0.54 + 0.46 * c if literal else 0.54 - 0.46 * c


def apply_hamming(frames: FrameMatrix, literal: bool = False) -> FrameMatrix:
    w = hamming_window(frames.frame_length, literal)
    return FrameMatrix(frames.frames * w, frames.frame_ms, frames.hop_ms, frames.sample_rate)


def default_fft_size(n: int) -> int:
    return 1 << max(0, int(np.ceil(np.log2(n))))


def power_spectrum(frames: FrameMatrix, fft_size: int | None = None) -> PowerSpectrumMatrix:
    """``|DFT_K(frame)[k]|^2`` for ``k = 0..K/2``, zero-padding each frame to ``K``."""
    n = frames.frame_length
    k = default_fft_size(n) if fft_size is None else int(fft_size)
    if k < n:
        raise ParameterError(f"fft_size {k} smaller than frame length {n}")
    if k & (k - 1):
        raise ParameterError(f"fft_size {k} is not a power of two")
    spec = np.fft.rfft(frames.frames, n=k, axis=1)
    return PowerSpectrumMatrix(spec.real ** 2 + spec.imag ** 2, k, frames.sample_rate)
