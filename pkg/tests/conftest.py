import struct

import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("repo", max_examples=40, deadline=None)
settings.load_profile("repo")


def wav_bytes(samples, rate=16000, channels=1, bits=16, codec=1):
    """Hand-packed RIFF/WAVE stream, independent of the library writer."""
    if codec == 3:
        body = np.asarray(samples, dtype="<f4").tobytes()
    elif bits == 8:
        body = np.asarray(samples, dtype=np.uint8).tobytes()
    else:
        body = np.asarray(samples, dtype="<i2").tobytes()
    block = channels * bits // 8
    fmt = struct.pack("<HHIIHH", codec, channels, rate, rate * block, block, bits)
    return (b"RIFF" + struct.pack("<I", 4 + 8 + len(fmt) + 8 + len(body)) + b"WAVE"
            + b"fmt " + struct.pack("<I", len(fmt)) + fmt
            + b"data" + struct.pack("<I", len(body)) + body)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def sample_models():
    """One small instance of every serializable model type."""
    from bimodal.align import SdmModel
    from bimodal.detect import HaarFeature, StrongClassifier, WeakClassifier
    from bimodal.fusion import pca_fit
    from bimodal.gmm import GmmModel
    from bimodal.ivector import TotalVariabilitySpace
    from bimodal.nn import dense_network
    from bimodal.cnn import build_toy_embedder, init_network
    from bimodal.rbm import DbnStack, Rbm

    r = np.random.default_rng(7)
    gmm = GmmModel([0.25, 0.75], r.normal(size=(2, 3)), r.uniform(0.5, 2, (2, 3)))
    tv = TotalVariabilitySpace(r.normal(size=(6, 2)), r.uniform(1, 2, 6), r.normal(size=6), 2)
    net = dense_network([4, 5, 3], seed=3)
    cnn = init_network(build_toy_embedder((12, 12), 3, 4, 2, 6), seed=1)
    dbn = DbnStack([Rbm.init(4, 3, "gaussian", 0), Rbm.init(3, 2, "bernoulli", 1)],
                   input_mean=r.normal(size=4), input_std=r.uniform(1, 2, 4))
    weak = [WeakClassifier(HaarFeature("two_rect_horizontal", 1, 2, 4, 3), 17, 0.25, 1),
            WeakClassifier(HaarFeature("two_rect_vertical", 0, 0, 3, 6), 3, -1.5, -1)]
    det = StrongClassifier(weak, [1.2, 0.4], (12, 12), True)
    sdm = SdmModel([(r.normal(size=(4, 5)), r.normal(size=4))], r.uniform(size=(2, 2)), 5,
                   [1.0, 0.5])
    pca = pca_fit(r.normal(size=(20, 5)), 3)
    return {"gmm": gmm, "tv": tv, "dense": net, "cnn": cnn, "dbn": dbn, "detector": det,
            "sdm": sdm, "pca": pca}
