"""Workflow steps shared by the CLI and the end-to-end experiment."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .cnn import build_toy_embedder, extract_embeddings, init_network, train_embedder
from .config import PipelineConfig
from .errors import ParameterError
from .fusion import (
    TrialScoreSet,
    compute_roc_eer,
    pca_fit,
    pca_transform,
    serial_fuse,
    utterance_vector,
)
from .gmm import train_gmm_em
from .ivector import accumulate_stats, extract_ivector, train_tv_em
from .mfcc import extract_mfcc
from .nn import OptimizerState
from .plp import extract_plp
from .synth import make_bimodal_corpus, make_trials


def mfcc_track(audio, cfg: PipelineConfig):
    return extract_mfcc(audio, cfg["audio.frame_ms"], cfg["audio.hop_ms"],
                        cfg["audio.pre_emphasis"], cfg["audio.n_filters"],
                        cfg["audio.mfcc_order"], cfg["audio.k_delta"],
                        domain=cfg["audio.filter_domain"],
                        literal_window=cfg["audio.literal_window"])


def plp_track(audio, cfg: PipelineConfig):
    return extract_plp(audio, cfg["audio.frame_ms"], cfg["audio.hop_ms"],
                       cfg["audio.pre_emphasis"], cfg["audio.plp_order"],
                       literal_window=cfg["audio.literal_window"])


def train_ubm(tracks, cfg: PipelineConfig, seed=0, history=None):
    data = np.vstack([np.asarray(getattr(t, "vectors", t)) for t in tracks])
    return train_gmm_em(data, cfg["ubm.components"], cfg["ubm.iters"], seed,
                        cfg["ubm.floor_ratio"], history)


def train_tv(tracks, ubm, cfg: PipelineConfig, seed=0, history=None):
    stats = [accumulate_stats(getattr(t, "vectors", t), ubm) for t in tracks]
    return train_tv_em(stats, ubm, cfg["tv.rank"], cfg["tv.iters"], seed,
                       cfg["tv.paper_literal"], history)


def ivectors(tracks, ubm, tv):
    return np.array([extract_ivector(accumulate_stats(getattr(t, "vectors", t), ubm), tv)
                     for t in tracks])


def plp_utterance_matrix(tracks, cfg: PipelineConfig):
    return np.array([utterance_vector(getattr(t, "vectors", t), cfg["pca.frames"])
                     for t in tracks])


def unit_rows(x, center=None):
    """Optionally centered rows scaled to unit length (zero rows stay zero)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if center is not None:
        x = x - center
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return np.divide(x, norms, out=np.zeros_like(x), where=norms > 0)


def speech_vectors(ivecs, plp_reduced, iv_center=None, plp_center=None):
    """Per-utterance speech feature: unit i-vector and unit PLP-PCA segments, jointly normalized."""
    return unit_rows(np.hstack([unit_rows(ivecs, iv_center), unit_rows(plp_reduced, plp_center)]))


def fuse_rows(face, speech):
    return np.array([serial_fuse(f, s).values for f, s in zip(face, speech)])


def cosine_matrix_scores(vectors, ii, jj):
    v = unit_rows(vectors)
    return np.einsum("ij,ij->i", v[ii], v[jj])


@dataclass
class ExperimentResult:
    seed: int
    eer_face: float
    eer_speech: float
    eer_fused: float
    n_same: int
    n_diff: int
    dims: dict = field(default_factory=dict)
    seconds: float = 0.0

    def fusion_helps(self):
        return self.eer_fused <= self.eer_face and self.eer_fused <= self.eer_speech


def run_bimodal_experiment(seed=0, cfg: PipelineConfig | None = None, n_subjects=20,
                           n_samples=25, n_test_subjects=8, n_trials=1000,
                           corpus_kwargs=None) -> ExperimentResult:
    """Train every model on the training subjects, score open-set test trials three ways.

    Face-only, speech-only and fused features are each scored by cosine
    similarity on the same random same/different trial list.
    """
    t0 = time.perf_counter()
    cfg = cfg or PipelineConfig()
    size = cfg["face.input_size"]
    corpus = make_bimodal_corpus(n_subjects, n_samples, seed, n_test_subjects,
                                 image_size=(size, size), **(corpus_kwargs or {}))
    train_idx = corpus.indices("train", "train_test")
    test_idx = corpus.indices("test")
    if not train_idx or not test_idx:
        raise ParameterError("experiment needs both training and test subjects")

    # speech branch
    mf = [mfcc_track(a, cfg).vectors for a in corpus.audio]
    pl = [plp_track(a, cfg).vectors for a in corpus.audio]
    ubm = train_ubm([mf[i] for i in train_idx], cfg, seed)
    tv = train_tv([mf[i] for i in train_idx], ubm, cfg, seed)
    iv = ivectors(mf, ubm, tv)
    plp_mat = plp_utterance_matrix(pl, cfg)
    pca = pca_fit(plp_mat[train_idx], min(cfg["pca.dim"], len(train_idx), plp_mat.shape[1]))
    plp_red = pca_transform(pca, plp_mat)
    speech = speech_vectors(iv, plp_red, iv[train_idx].mean(axis=0), plp_red[train_idx].mean(axis=0))

    # face branch
    train_subjects = sorted({corpus.subjects[i] for i in train_idx})
    label_of = {s: k for k, s in enumerate(train_subjects)}
    spec = build_toy_embedder((size, size), len(train_subjects), cfg["face.embedding_dim"],
                              cfg["face.channels"], cfg["face.hidden"])
    net = init_network(spec, seed)
    train_embedder(net, [corpus.images[i] for i in train_idx],
                   [label_of[corpus.subjects[i]] for i in train_idx],
                   OptimizerState("rmsprop", rate=cfg["face.rate"]), cfg["face.epochs"],
                   cfg["face.batch_size"], seed)
    emb = extract_embeddings(net, corpus.images)
    face = unit_rows(emb, emb[train_idx].mean(axis=0))

    fused = fuse_rows(face, speech)

    rng = np.random.default_rng(seed + 7919)
    test_subjects = np.array([corpus.subjects[i] for i in test_idx])
    ii, jj, labels = make_trials(test_subjects, rng, n_trials, n_trials)
    ii, jj = np.asarray(test_idx)[ii], np.asarray(test_idx)[jj]
    eers = {}
    for name, vecs in (("face", face), ("speech", speech), ("fused", fused)):
        eers[name] = compute_roc_eer(TrialScoreSet(cosine_matrix_scores(vecs, ii, jj), labels)).eer
    dims = {"mfcc": mf[0].shape[1], "plp": pl[0].shape[1], "ivector": iv.shape[1],
            "plp_pca": plp_red.shape[1], "speech": speech.shape[1], "face": face.shape[1],
            "fused": fused.shape[1]}
    return ExperimentResult(seed, eers["face"], eers["speech"], eers["fused"],
                            int(labels.sum()), int((labels == 0).sum()), dims,
                            time.perf_counter() - t0)
