"""Synthetic bimodal corpora: tone-complex voices and blob-pattern face patches."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .io import AudioBuffer, GrayImage


@dataclass
class VoiceProfile:
    f0: float
    formants: np.ndarray  # (3,) Hz
    bandwidths: np.ndarray  # (3,) Hz
    tilt: float  # spectral slope, dB per kHz


def random_voice(rng) -> VoiceProfile:
    return VoiceProfile(
        f0=float(rng.uniform(90.0, 240.0)),
        formants=np.array([rng.uniform(300, 900), rng.uniform(1000, 2200),
                           rng.uniform(2400, 3400)]),
        bandwidths=rng.uniform(80.0, 200.0, size=3),
        tilt=float(rng.uniform(-9.0, -3.0)),
    )


def spectral_envelope(profile: VoiceProfile, freqs):
    """Sum of resonance peaks plus a log-linear tilt, in linear amplitude."""
    f = np.asarray(freqs, dtype=np.float64)
    env = np.zeros_like(f)
    for fc, bw in zip(profile.formants, profile.bandwidths):
        env += 1.0 / (1.0 + ((f - fc) / (0.5 * bw)) ** 2)
    return (0.05 + env) * 10.0 ** (profile.tilt * f / 1000.0 / 20.0)


def synth_voice(profile: VoiceProfile, rng, duration=0.6, sample_rate=8000, jitter=0.04,
                snr_db=15.0) -> AudioBuffer:
    """One utterance: harmonics of a jittered f0 shaped by a perturbed envelope, plus noise."""
    n = int(round(duration * sample_rate))
    t = np.arange(n) / sample_rate
    f0 = profile.f0 * (1.0 + rng.normal(0.0, jitter))
    p = VoiceProfile(f0, profile.formants * (1.0 + rng.normal(0.0, jitter, 3)),
                     profile.bandwidths, profile.tilt + rng.normal(0.0, 1.0))
    vibrato = 1.0 + 0.01 * np.sin(2 * np.pi * rng.uniform(3, 6) * t)
    phase = 2 * np.pi * np.cumsum(f0 * vibrato) / sample_rate
    n_harm = int((0.5 * sample_rate - 100) // f0)
    k = np.arange(1, n_harm + 1)
    amps = spectral_envelope(p, k * f0)
    sig = np.sin(np.outer(phase, k) + rng.uniform(0, 2 * np.pi, n_harm)) @ amps
    sig /= np.sqrt(np.mean(sig ** 2))
    sig += rng.normal(0.0, 10.0 ** (-snr_db / 20.0), n)
    ramp = np.minimum(1.0, np.minimum(t, t[-1] - t) / 0.02)
    sig *= ramp * 0.3 * rng.uniform(0.5, 1.0) / np.max(np.abs(sig))
    return AudioBuffer(sig, sample_rate)


def random_face_pattern(rng, size=(20, 20), n_blobs=6) -> np.ndarray:
    """Signed Gaussian blobs around mid-gray; each subject gets its own layout."""
    h, w = size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    out = np.zeros(size)
    for _ in range(n_blobs):
        cy, cx = rng.uniform(2, h - 2), rng.uniform(2, w - 2)
        s = rng.uniform(1.5, 3.5)
        out += rng.choice([-1.0, 1.0]) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
    return out / np.max(np.abs(out))


def synth_face(pattern, rng, noise=25.0, contrast=60.0, max_shift=1) -> GrayImage:
    """Shifted, contrast-jittered rendering of a subject pattern with pixel noise."""
    dy, dx = rng.integers(-max_shift, max_shift + 1, size=2)
    p = np.roll(np.roll(pattern, dy, axis=0), dx, axis=1)
    img = 128.0 + contrast * rng.uniform(0.7, 1.3) * p + rng.uniform(-15, 15)
    img += rng.normal(0.0, noise, p.shape)
    return GrayImage(np.clip(img, 0.0, 255.0))


@dataclass
class BimodalCorpus:
    subjects: list  # subject id per sample
    audio: list  # AudioBuffer per sample
    images: list  # GrayImage per sample
    splits: list  # "train" | "train_test" | "test"

    def indices(self, *splits):
        return [i for i, s in enumerate(self.splits) if s in splits]


def make_bimodal_corpus(n_subjects=20, n_samples=25, seed=0, n_test_subjects=8, n_train_test=5,
                        image_size=(20, 20), face_noise=25.0, voice_jitter=0.04,
                        snr_db=15.0, duration=0.6, sample_rate=8000) -> BimodalCorpus:
    """Subjects with independent voices and faces, randomly paired sample by sample.

    The last ``n_test_subjects`` subjects form the open-set test split; the
    others contribute ``n_train_test`` held-out samples each to
    ``train_test`` and the rest to ``train``.
    """
    rng = np.random.default_rng(seed)
    subjects, audio, images, splits = [], [], [], []
    for s in range(n_subjects):
        voice = random_voice(rng)
        pattern = random_face_pattern(rng, image_size)
        sid = f"s{s:03d}"
        utts = [synth_voice(voice, rng, duration, sample_rate, voice_jitter, snr_db)
                for _ in range(n_samples)]
        faces = [synth_face(pattern, rng, face_noise) for _ in range(n_samples)]
        # faces and voices are drawn independently, then paired at random
        pairing = rng.permutation(n_samples)
        for j in range(n_samples):
            subjects.append(sid)
            audio.append(utts[j])
            images.append(faces[pairing[j]])
            if s >= n_subjects - n_test_subjects:
                splits.append("test")
            else:
                splits.append("train_test" if j >= n_samples - n_train_test else "train")
    return BimodalCorpus(subjects, audio, images, splits)


def make_trials(subjects, rng, n_same=None, n_diff=None):
    """Random same/different index pairs over the given subject labels (no self pairs)."""
    subjects = np.asarray(subjects)
    n = subjects.size
    ii, jj = np.triu_indices(n, k=1)
    same = subjects[ii] == subjects[jj]
    pos = np.flatnonzero(same)
    neg = np.flatnonzero(~same)
    if n_same is not None and n_same < pos.size:
        pos = np.sort(rng.choice(pos, n_same, replace=False))
    if n_diff is not None and n_diff < neg.size:
        neg = np.sort(rng.choice(neg, n_diff, replace=False))
    pick = np.r_[pos, neg]
    return ii[pick], jj[pick], np.r_[np.ones(pos.size, int), np.zeros(neg.size, int)]


def detection_pattern(size=12):
    """Face-like window: bright forehead, dark eye band, bright cheeks, dark mouth."""
    p = np.full((size, size), 150.0)
    q = size // 4
    p[:q] = 200.0
    p[q:2 * q] = 60.0
    p[3 * q:, q:3 * q] = 70.0
    return p


def detection_training_set(rng, n_pos=80, n_neg=400, size=12, noise=15.0, shape=(48, 48)):
    """Exact pattern crops as positives; scene crops overlapping the pattern by IoU < 0.5
    (background, partial patterns and near misses) as negatives."""
    pos, neg = [], []
    while len(pos) < n_pos or len(neg) < n_neg:
        img, (bx, by, _, _) = detection_scene(rng, shape, size, noise=noise)
        px = img.pixels
        if len(pos) < n_pos:
            pos.append(px[by:by + size, bx:bx + size].copy())
        for k in range(6):
            if k < 3:  # near misses around the pattern
                x = int(np.clip(bx + rng.integers(-6, 7), 0, shape[1] - size))
                y = int(np.clip(by + rng.integers(-6, 7), 0, shape[0] - size))
            else:
                x = int(rng.integers(0, shape[1] - size + 1))
                y = int(rng.integers(0, shape[0] - size + 1))
            ov = max(0, size - abs(x - bx)) * max(0, size - abs(y - by))
            if ov / (2 * size * size - ov) < 0.5 and len(neg) < n_neg:
                neg.append(px[y:y + size, x:x + size].copy())
    return pos, neg


def detection_scene(rng, shape=(48, 48), size=12, at=None, noise=15.0):
    """Noisy background with one planted pattern; returns ``(image, (x, y, w, h))``."""
    h, w = shape
    img = 128.0 + rng.normal(0, 20.0, shape)
    x, y = at if at is not None else (int(rng.integers(0, w - size)), int(rng.integers(0, h - size)))
    img[y:y + size, x:x + size] = detection_pattern(size) + rng.normal(0, noise, (size, size))
    return GrayImage(np.clip(img, 0, 255)), (x, y, size, size)


def bootstrap_detector(rng, rounds=30, n_scenes=60, passes=3, size=12):
    """Train on scene crops, then repeatedly add scanned false positives as negatives."""
    from .detect import mine_hard_negatives, train_detector

    pos, neg = detection_training_set(rng, size=size)
    scenes = [detection_scene(rng, size=size) for _ in range(n_scenes)]
    sc = train_detector(pos, neg, (size, size), rounds)
    for _ in range(passes):
        hard = mine_hard_negatives(sc, [s[0] for s in scenes], [s[1] for s in scenes],
                                   max_iou=0.6)
        if not hard:
            break
        neg = neg + hard
        sc = train_detector(pos, neg, (size, size), rounds)
    return sc
