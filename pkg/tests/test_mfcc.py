import math

import numpy as np
import pytest

from bimodal import errors
from bimodal.dsp import FrameMatrix, PowerSpectrumMatrix
from bimodal.io import AudioBuffer
from bimodal.mfcc import (
    AcousticFeatureSequence,
    append_deltas_and_energy,
    build_filterbank,
    deltas,
    extract_mfcc,
    hz_to_mel,
    mel_boundaries,
    mfcc_from_power,
)

from oracles import mel


def test_mel_values():
    assert hz_to_mel(0.0) == 0.0
    assert hz_to_mel(700.0) == pytest.approx(2595 * math.log10(2))
    assert hz_to_mel(700.0) == pytest.approx(781.17, abs=0.01)
    with pytest.raises(errors.ParameterError):
        hz_to_mel(-1.0)


def test_boundaries_equally_spaced():
    edges = mel_boundaries(24, 0.0, 8000.0)
    assert edges.size == 26
    m = np.array([mel(f) for f in edges])
    np.testing.assert_allclose(np.diff(m), mel(8000) / 25, rtol=1e-12)


@pytest.mark.parametrize("n_filters,k,rate", [(24, 512, 16000), (20, 256, 8000), (40, 1024, 16000)])
def test_filterbank_shape_invariants(n_filters, k, rate):
    bank = build_filterbank(n_filters, k, rate)
    assert np.all(bank.lower < bank.centers) and np.all(bank.centers < bank.upper)
    # c(l) == h(l-1) == o(l+1)
    np.testing.assert_array_equal(bank.centers[1:], bank.upper[:-1])
    np.testing.assert_array_equal(bank.centers[:-1], bank.lower[1:])
    for l in range(n_filters):
        assert bank.weights[l, bank.centers[l]] == 1.0
        assert bank.weights[l, bank.lower[l]] == 0.0
        assert bank.weights[l, bank.upper[l]] == 0.0
        assert bank.weights[l].max() == 1.0


def test_filterbank_resolution_error():
    with pytest.raises(errors.ResolutionError):
        build_filterbank(40, 32, 16000)


def _spectrum(rows, k=512, rate=16000):
    return PowerSpectrumMatrix(np.asarray(rows, dtype=float), k, rate)


def test_floored_zero_spectrum_gives_zero_cepstra():
    bank = build_filterbank(24, 512, 16000)
    zero = mfcc_from_power(_spectrum(np.zeros((2, 257))), bank, 13).vectors
    np.testing.assert_allclose(zero, 0.0, atol=1e-12)


def test_cepstra_of_constant_log_outputs_vanish():
    # sum_l cos((l - 1/2) i pi / L) = 0 for i >= 1
    from bimodal.mfcc import dct_matrix

    np.testing.assert_allclose(dct_matrix(13, 24) @ np.full(24, 7.5), 0.0, atol=1e-12)


def test_mfcc_matches_triple_loop():
    rng = np.random.default_rng(0)
    spec = rng.uniform(0, 10, size=(3, 257))
    bank = build_filterbank(24, 512, 16000)
    got = mfcc_from_power(_spectrum(spec), bank, 13).vectors
    ref = np.zeros((3, 13))
    for t in range(3):
        logs = []
        for l in range(24):
            o, c, h = bank.lower[l], bank.centers[l], bank.upper[l]
            acc = 0.0
            for k in range(257):
                if o <= k <= c:
                    w = (k - o) / (c - o)
                elif c < k <= h:
                    w = (h - k) / (h - c)
                else:
                    w = 0.0
                acc += w * math.sqrt(spec[t, k])
            logs.append(math.log10(acc))
        for i in range(1, 14):
            ref[t, i - 1] = math.sqrt(2 / 24) * sum(
                logs[l] * math.cos((l + 0.5) * i * math.pi / 24) for l in range(24))
    np.testing.assert_allclose(got, ref, rtol=1e-10, atol=1e-12)


def test_deltas_examples():
    np.testing.assert_array_equal(deltas(np.full((7, 2), 4.0), 2), 0.0)
    d = deltas(np.arange(9, dtype=float)[:, None], 2)
    np.testing.assert_allclose(d[2:-2, 0], 10 / math.sqrt(10))
    assert d[4, 0] == pytest.approx(3.162, abs=1e-3)
    with pytest.raises(errors.InsufficientDataError):
        deltas(np.zeros((4, 1)), 2)


def test_feature_dimension_40():
    c = AcousticFeatureSequence(np.random.default_rng(0).normal(size=(10, 13)), "mfcc", 25, 20)
    frames = FrameMatrix(np.ones((10, 400)), 25, 20, 16000)
    out = append_deltas_and_energy(c, frames)
    assert out.dim == 40
    np.testing.assert_allclose(out.vectors[:, -1], math.log(400.0))


def test_extract_mfcc_one_second():
    t = np.arange(16000) / 16000
    audio = AudioBuffer(0.3 * np.sin(2 * np.pi * 440 * t), 16000)
    feats = extract_mfcc(audio)
    assert feats.vectors.shape == (49, 40)
    assert np.all(np.isfinite(feats.vectors))
