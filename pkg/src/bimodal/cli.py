"""Batch command line: feature extraction, model training, fusion and evaluation.

Exit codes: 0 success, 1 usage error, 2 data error (missing or malformed
input), 3 invariant violation.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import errors
from .align import align_face, sdm_predict, sdm_train
from .cnn import build_toy_embedder, extract_embeddings, init_network, train_embedder
from .config import PipelineConfig, load_config
from .detect import format_boxes_csv, scan_detect, train_detector
from .fusion import (
    TrialScoreSet,
    compute_roc_eer,
    cosine_score,
    minmax_normalize,
    pca_fit,
    pca_transform,
    roc_csv,
    roc_svg,
    utterance_vector,
)
from .io import (
    load_manifest,
    load_model,
    read_pgm,
    read_wav,
    save_model,
    write_pgm,
)
from .nn import OptimizerState
from .pipeline import mfcc_track, plp_track, train_tv, train_ubm, unit_rows
from .gmm import GmmModel
from .ivector import TotalVariabilitySpace, accumulate_stats, extract_ivector
from .rbm import DbnStack, finetune, pretrain_stack

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INVARIANT = 0, 1, 2, 3

DATA_ERRORS = (errors.FormatError, errors.UnsupportedError, errors.ManifestError,
               errors.VersionError, errors.IntegrityError, errors.InsufficientDataError)


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --------------------------------------------------------------------------
# file helpers

class Context:
    def __init__(self, command, cfg: PipelineConfig, seed):
        self.command = command
        self.cfg = cfg
        self.seed = seed

    @property
    def header(self):
        return f"# command={self.command} config={self.cfg.hash()} seed={self.seed}"

    @property
    def provenance(self):
        return {"command": self.command, "config": self.cfg.hash(), "seed": self.seed}


def _need(path, what):
    p = Path(path)
    if not p.exists():
        raise DataError(f"missing {what}: {p}")
    return p


def _write_text(path, text):
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(text, encoding="utf-8")


def _manifest(path):
    p = _need(path, "manifest")
    return load_manifest(p.read_text(encoding="utf-8"), root=p.parent)


def _matrix_csv(ctx, rows) -> str:
    lines = [ctx.header]
    lines += [",".join(f"{v:.10g}" for v in row) for row in np.atleast_2d(rows)]
    return "\n".join(lines) + "\n"


def _read_matrix(path):
    p = _need(path, "feature file")
    rows = [line for line in p.read_text(encoding="utf-8").splitlines()
            if line.strip() and not line.startswith("#")]
    if not rows:
        raise DataError(f"no data rows in {p}")
    try:
        return np.array([[float(v) for v in r.split(",")] for r in rows])
    except ValueError as exc:
        raise DataError(f"malformed feature file {p}: {exc}") from None


def _feature_path(out_dir, entry):
    return Path(out_dir) / Path(entry.path).with_suffix(".csv")


def _write_vectors(path, ctx, keys, subjects, vectors):
    lines = [ctx.header, "# key,subject,values..."]
    for k, s, v in zip(keys, subjects, np.atleast_2d(vectors)):
        lines.append(",".join([k, s] + [f"{x:.10g}" for x in v]))
    _write_text(path, "\n".join(lines) + "\n")


def _read_vectors(path):
    p = _need(path, "vector file")
    keys, subjects, rows = [], [], []
    for n, line in enumerate(p.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split(",")
        if len(parts) < 3:
            raise DataError(f"{p} line {n}: expected key,subject,values")
        keys.append(parts[0])
        subjects.append(parts[1])
        try:
            rows.append([float(v) for v in parts[2:]])
        except ValueError:
            raise DataError(f"{p} line {n}: non-numeric value") from None
    if len({len(r) for r in rows}) > 1:
        raise DataError(f"{p}: rows differ in length")
    return keys, subjects, np.array(rows)


def _read_trials(path, scored=False):
    p = _need(path, "trial file")
    out = []
    for n, line in enumerate(p.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = [s.strip() for s in line.split(",")]
        if len(parts) < (4 if scored else 3):
            raise DataError(f"{p} line {n}: expected id_a,id_b,label{',score' if scored else ''}")
        try:
            label = int(parts[2])
            score = float(parts[3]) if scored else None
        except ValueError:
            raise DataError(f"{p} line {n}: bad label or score") from None
        if label not in (0, 1):
            raise DataError(f"{p} line {n}: label must be 0 or 1")
        out.append((parts[0], parts[1], label, score))
    return out


def _feature_tracks(manifest, feat_dir, splits=None):
    entries = manifest.select("audio", splits)
    if not entries:
        raise DataError("manifest has no matching audio entries")
    return entries, [_read_matrix(_feature_path(feat_dir, e)) for e in entries]


def _load(path, cls, what):
    model = load_model(_need(path, what))
    if not isinstance(model, cls):
        raise DataError(f"{path} holds a {type(model).__name__}, expected {cls.__name__}")
    return model


def _images(manifest, splits=None):
    entries = manifest.select("image", splits)
    if not entries:
        raise DataError("manifest has no matching image entries")
    return entries, [read_pgm(_need(manifest.resolve(e), "image")) for e in entries]


def _pgm_dir(path):
    d = _need(path, "image directory")
    files = sorted(d.glob("*.pgm"))
    if not files:
        raise DataError(f"no .pgm files in {d}")
    return [read_pgm(f) for f in files]


# --------------------------------------------------------------------------
# commands

def cmd_extract(args, ctx, kind):
    manifest = _manifest(args.manifest)
    entries = manifest.select("audio", args.splits)
    if not entries:
        raise DataError("manifest has no matching audio entries")
    for e in entries:
        audio = read_wav(_need(manifest.resolve(e), "audio file"))
        track = mfcc_track(audio, ctx.cfg) if kind == "mfcc" else plp_track(audio, ctx.cfg)
        _write_text(_feature_path(args.out, e), _matrix_csv(ctx, track.vectors))
    print(f"wrote {len(entries)} {kind} files to {args.out}")


def cmd_train_ubm(args, ctx):
    _, tracks = _feature_tracks(_manifest(args.manifest), args.features, args.splits)
    ubm = train_ubm(tracks, ctx.cfg, ctx.seed)
    save_model(ubm, args.out, ctx.provenance)
    print(f"UBM with {ubm.n_components} components, dim {ubm.dim} -> {args.out}")


def cmd_train_tv(args, ctx):
    ubm = _load(args.ubm, GmmModel, "UBM")
    _, tracks = _feature_tracks(_manifest(args.manifest), args.features, args.splits)
    tv = train_tv(tracks, ubm, ctx.cfg, ctx.seed)
    save_model(tv, args.out, ctx.provenance)
    print(f"T matrix {tv.T.shape} -> {args.out}")


def cmd_extract_ivector(args, ctx):
    ubm = _load(args.ubm, GmmModel, "UBM")
    tv = _load(args.tv, TotalVariabilitySpace, "TV model")
    entries, tracks = _feature_tracks(_manifest(args.manifest), args.features, args.splits)
    vecs = [extract_ivector(accumulate_stats(t, ubm), tv) for t in tracks]
    _write_vectors(args.out, ctx, [e.path for e in entries], [e.subject_id for e in entries], vecs)
    print(f"{len(vecs)} i-vectors of dim {tv.rank} -> {args.out}")


def cmd_train_detector(args, ctx):
    w = ctx.cfg["detect.window"]
    sc = train_detector(_pgm_dir(args.positives), _pgm_dir(args.negatives), (w, w),
                        ctx.cfg["detect.rounds"])
    save_model(sc, args.out, ctx.provenance)
    print(f"detector with {len(sc.weak)} weak classifiers -> {args.out}")


def cmd_detect(args, ctx):
    from .detect import StrongClassifier

    sc = _load(args.model, StrongClassifier, "detector")
    img = read_pgm(_need(args.image, "image"))
    nms = ctx.cfg["detect.nms_iou"]
    boxes = scan_detect(img, sc, step=ctx.cfg["detect.step"],
                        scales=ctx.cfg.floats("detect.scales"), nms_iou=nms if nms > 0 else None)
    _write_text(args.out, format_boxes_csv(boxes, ctx.header))
    print(f"{len(boxes)} boxes -> {args.out}")


def _landmarks(path):
    pts = _read_matrix(path)
    if pts.shape[1] != 2:
        raise DataError(f"{path}: landmark rows must be x,y")
    return pts


def cmd_train_sdm(args, ctx):
    manifest = _manifest(args.manifest)
    entries, images = _images(manifest, args.splits)
    shapes = [_landmarks(_feature_path(args.landmarks, e)) for e in entries]
    boxes = [(0.0, 0.0, float(im.width), float(im.height)) for im in images]
    x0 = np.mean([(s - b[:2]) / b[2:] for s, b in zip(shapes, np.array(boxes))], axis=0)
    model = sdm_train(images, shapes, x0, ctx.cfg["sdm.stages"], boxes, ctx.cfg["sdm.patch"])
    save_model(model, args.out, ctx.provenance)
    errs = ", ".join(f"{e:.4g}" for e in model.stage_errors)
    print(f"SDM with {len(model.stages)} stages (RMS error per stage: {errs}) -> {args.out}")


def cmd_align(args, ctx):
    from .align import SdmModel

    model = _load(args.model, SdmModel, "SDM model")
    img = read_pgm(_need(args.image, "image"))
    pts = sdm_predict(model, img)
    if args.landmarks_out:
        _write_text(args.landmarks_out, _matrix_csv(ctx, pts))
    if args.out:
        if pts.shape[0] != 5:
            raise errors.ParameterError("canonical alignment needs a 5-landmark model")
        warped, _ = align_face(img, pts)
        _write_text_bytes(args.out, write_pgm(warped), ctx.header)
    print(f"{pts.shape[0]} landmarks located")


def _write_text_bytes(path, pgm_bytes, header):
    # PGM allows comment lines after the magic number
    magic, rest = pgm_bytes.split(b"\n", 1)
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_bytes(magic + b"\n" + header.encode("ascii") + b"\n" + rest)


def cmd_train_embedder(args, ctx):
    manifest = _manifest(args.manifest)
    entries, images = _images(manifest, args.splits or ["train", "train_test"])
    subjects = sorted({e.subject_id for e in entries})
    label_of = {s: k for k, s in enumerate(subjects)}
    h, w = images[0].height, images[0].width
    spec = build_toy_embedder((h, w), len(subjects), ctx.cfg["face.embedding_dim"],
                              ctx.cfg["face.channels"], ctx.cfg["face.hidden"])
    net = init_network(spec, ctx.seed)
    train_embedder(net, images, [label_of[e.subject_id] for e in entries],
                   OptimizerState("rmsprop", rate=ctx.cfg["face.rate"]), ctx.cfg["face.epochs"],
                   ctx.cfg["face.batch_size"], ctx.seed)
    save_model(net, args.out, ctx.provenance)
    print(f"embedder over {len(subjects)} classes -> {args.out}")


def cmd_embed(args, ctx):
    from .nn import LayeredNetwork

    net = _load(args.model, LayeredNetwork, "embedder")
    manifest = _manifest(args.manifest)
    entries, images = _images(manifest, args.splits)
    emb = extract_embeddings(net, images)
    _write_vectors(args.out, ctx, [e.path for e in entries], [e.subject_id for e in entries], emb)
    print(f"{len(entries)} embeddings of dim {emb.shape[1]} -> {args.out}")


def cmd_pca_fit(args, ctx):
    entries, tracks = _feature_tracks(_manifest(args.manifest), args.features, args.splits)
    mat = np.array([utterance_vector(t, ctx.cfg["pca.frames"]) for t in tracks])
    model = pca_fit(mat, ctx.cfg["pca.dim"])
    save_model(model, args.out, ctx.provenance)
    print(f"PCA {mat.shape[1]} -> {model.dim} -> {args.out}")


def cmd_pca_apply(args, ctx):
    from .fusion import PcaModel

    model = _load(args.model, PcaModel, "PCA model")
    entries, tracks = _feature_tracks(_manifest(args.manifest), args.features, args.splits)
    mat = np.array([utterance_vector(t, ctx.cfg["pca.frames"]) for t in tracks])
    _write_vectors(args.out, ctx, [e.path for e in entries], [e.subject_id for e in entries],
                   pca_transform(model, mat))
    print(f"{len(entries)} reduced vectors -> {args.out}")


def cmd_fuse(args, ctx):
    """Concatenate unit-length segments, paired by key or randomly within subject."""
    ka, sa, va = _read_vectors(args.a)
    kb, sb, vb = _read_vectors(args.b)
    center = args.center
    va = unit_rows(va, va.mean(axis=0) if center else None)
    vb = unit_rows(vb, vb.mean(axis=0) if center else None)
    keys, subjects, rows = [], [], []
    if args.pair == "key":
        index = {k: i for i, k in enumerate(kb)}
        for i, k in enumerate(ka):
            if k in index:
                keys.append(k)
                subjects.append(sa[i])
                rows.append(np.r_[va[i], vb[index[k]]])
    else:
        rng = np.random.default_rng(ctx.seed)
        for subj in sorted(set(sa) & set(sb)):
            ia = [i for i, s in enumerate(sa) if s == subj]
            ib = [i for i, s in enumerate(sb) if s == subj]
            n = min(len(ia), len(ib))
            pick_a = rng.permutation(ia)[:n]
            pick_b = rng.permutation(ib)[:n]
            for i, j in zip(sorted(pick_a), pick_b):
                keys.append(f"{ka[i]}+{kb[j]}")
                subjects.append(subj)
                rows.append(np.r_[va[i], vb[j]])
    if not rows:
        raise DataError("no rows could be paired")
    _write_vectors(args.out, ctx, keys, subjects, unit_rows(np.array(rows)))
    print(f"{len(rows)} fused vectors of dim {len(rows[0])} -> {args.out}")


def cmd_make_trials(args, ctx):
    from .synth import make_trials

    keys, subjects, _ = _read_vectors(args.vectors)
    rng = np.random.default_rng(ctx.seed)
    ii, jj, labels = make_trials(subjects, rng, args.n, args.n)
    lines = [ctx.header] + [f"{keys[i]},{keys[j]},{l}" for i, j, l in zip(ii, jj, labels)]
    _write_text(args.out, "\n".join(lines) + "\n")
    print(f"{int(labels.sum())} same / {int((labels == 0).sum())} different trials -> {args.out}")


def cmd_train_dbn(args, ctx):
    _, subjects, x = _read_vectors(args.vectors)
    classes = sorted(set(subjects))
    y = np.array([classes.index(s) for s in subjects])
    topo = ctx.cfg.topology(args.topology)
    stack = pretrain_stack(x, topo, ctx.cfg["dbn.epochs"], ctx.cfg["dbn.rate"], ctx.seed,
                           ctx.cfg["dbn.batch_size"])
    opt = OptimizerState(ctx.cfg["nn.optimizer"], rate=ctx.cfg["nn.rate"],
                         step_size=ctx.cfg["nn.step_size"], gamma=ctx.cfg["nn.gamma"])
    stack = finetune(stack, x, y, opt, ctx.cfg["dbn.finetune_epochs"], ctx.cfg["dbn.batch_size"],
                     ctx.seed, n_classes=len(classes))
    save_model(stack, args.out, ctx.provenance)
    print(f"DBN {stack.topology} + softmax({len(classes)}) -> {args.out}")


def cmd_score_trials(args, ctx):
    keys, _, vecs = _read_vectors(args.vectors)
    if args.dbn:
        vecs = _load(args.dbn, DbnStack, "DBN").transform(vecs)
    index = {k: i for i, k in enumerate(keys)}
    trials = _read_trials(args.trials)
    scores = []
    for a, b, _, _ in trials:
        if a not in index or b not in index:
            raise DataError(f"trial references unknown vector {a if a not in index else b!r}")
        scores.append(cosine_score(vecs[index[a]], vecs[index[b]]))
    if args.normalize:
        scores = list(minmax_normalize(scores))
    lines = [ctx.header] + [f"{a},{b},{l},{s:.10g}" for (a, b, l, _), s in zip(trials, scores)]
    _write_text(args.out, "\n".join(lines) + "\n")
    print(f"scored {len(trials)} trials -> {args.out}")


def cmd_roc(args, ctx):
    trials = _read_trials(args.trials, scored=True)
    curve = compute_roc_eer(TrialScoreSet([t[3] for t in trials], [t[2] for t in trials]))
    _write_text(args.out, roc_csv(curve, ctx.header))
    if args.svg:
        _write_text(args.svg, roc_svg(curve, header=ctx.header))
    print(f"EER {curve.eer:.6g} at threshold {curve.eer_threshold:.6g}")


def cmd_synth_corpus(args, ctx):
    """Write a synthetic bimodal corpus (WAV + PGM) and its manifest."""
    from .io import write_wav
    from .synth import make_bimodal_corpus

    size = ctx.cfg["face.input_size"]
    corpus = make_bimodal_corpus(args.subjects, args.samples, ctx.seed,
                                 n_test_subjects=args.test_subjects, image_size=(size, size))
    root = Path(args.out)
    lines = [ctx.header]
    for k, (sid, audio, img, split) in enumerate(zip(corpus.subjects, corpus.audio,
                                                     corpus.images, corpus.splits)):
        wav = Path("audio") / sid / f"{k:05d}.wav"
        pgm = Path("image") / sid / f"{k:05d}.pgm"
        for rel, data in ((wav, write_wav(audio)), (pgm, write_pgm(img))):
            (root / rel).parent.mkdir(parents=True, exist_ok=True)
            (root / rel).write_bytes(data)
        lines.append(f"{sid},audio,{wav.as_posix()},{split}")
        lines.append(f"{sid},image,{pgm.as_posix()},{split}")
    _write_text(root / "manifest.csv", "\n".join(lines) + "\n")
    print(f"{len(corpus.subjects)} samples -> {root}")


# --------------------------------------------------------------------------
# argument parsing

def build_parser():
    p = _Parser(prog="bimodal", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="key=value configuration file")
    p.add_argument("--preset", choices=("desk", "paper"), help="base preset when no config")
    p.add_argument("--seed", type=int, help="overrides run.seed")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, func, help_text):
        sp = sub.add_parser(name, help=help_text)
        sp.set_defaults(func=func)
        return sp

    def splits(sp):
        sp.add_argument("--splits", nargs="+", choices=("train", "train_test", "test"))

    for name, kind in (("extract-mfcc", "mfcc"), ("extract-plp", "plp")):
        sp = add(name, lambda a, c, k=kind: cmd_extract(a, c, k), f"{kind.upper()} per audio entry")
        sp.add_argument("--manifest", required=True)
        sp.add_argument("--out", required=True, help="output directory")
        splits(sp)

    sp = add("train-ubm", cmd_train_ubm, "EM-trained universal background model")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--features", required=True, help="MFCC directory")
    sp.add_argument("--out", required=True)
    splits(sp)

    sp = add("train-tv", cmd_train_tv, "total-variability matrix by EM")
    for flag in ("--manifest", "--features", "--ubm", "--out"):
        sp.add_argument(flag, required=True)
    splits(sp)

    sp = add("extract-ivector", cmd_extract_ivector, "i-vector per utterance")
    for flag in ("--manifest", "--features", "--ubm", "--tv", "--out"):
        sp.add_argument(flag, required=True)
    splits(sp)

    sp = add("train-detector", cmd_train_detector, "AdaBoost Haar detector")
    for flag in ("--positives", "--negatives", "--out"):
        sp.add_argument(flag, required=True)

    sp = add("detect", cmd_detect, "scan one image for faces")
    for flag in ("--model", "--image", "--out"):
        sp.add_argument(flag, required=True)

    sp = add("train-sdm", cmd_train_sdm, "supervised descent landmark cascade")
    for flag in ("--manifest", "--landmarks", "--out"):
        sp.add_argument(flag, required=True)
    splits(sp)

    sp = add("align", cmd_align, "locate landmarks and warp to the canonical face")
    sp.add_argument("--model", required=True)
    sp.add_argument("--image", required=True)
    sp.add_argument("--out", help="aligned PGM")
    sp.add_argument("--landmarks-out", help="landmark CSV")

    sp = add("train-embedder", cmd_train_embedder, "toy CNN face embedder")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out", required=True)
    splits(sp)

    sp = add("embed", cmd_embed, "penultimate-layer face embeddings")
    for flag in ("--manifest", "--model", "--out"):
        sp.add_argument(flag, required=True)
    splits(sp)

    for name, func, text in (("pca-fit", cmd_pca_fit, "PCA on resampled PLP utterances"),
                             ("pca-apply", cmd_pca_apply, "reduce PLP utterances")):
        sp = add(name, func, text)
        sp.add_argument("--manifest", required=True)
        sp.add_argument("--features", required=True, help="PLP directory")
        sp.add_argument("--out", required=True)
        if name == "pca-apply":
            sp.add_argument("--model", required=True)
        splits(sp)

    sp = add("fuse", cmd_fuse, "serial fusion of two vector files")
    sp.add_argument("--a", required=True, help="first segment (e.g. face)")
    sp.add_argument("--b", required=True, help="second segment (e.g. speech)")
    sp.add_argument("--pair", choices=("key", "subject"), default="subject")
    sp.add_argument("--center", action="store_true", help="subtract each file's mean first")
    sp.add_argument("--out", required=True)

    sp = add("make-trials", cmd_make_trials, "random same/different trial list")
    sp.add_argument("--vectors", required=True)
    sp.add_argument("--n", type=int, default=1000, help="trials per label")
    sp.add_argument("--out", required=True)

    sp = add("train-dbn", cmd_train_dbn, "pretrain and fine-tune a DBN on labeled vectors")
    sp.add_argument("--vectors", required=True)
    sp.add_argument("--topology", default="dbn.fusion_topology",
                    choices=("dbn.fusion_topology", "dbn.speaker_topology"))
    sp.add_argument("--out", required=True)

    sp = add("score-trials", cmd_score_trials, "cosine score a trial list")
    sp.add_argument("--vectors", required=True)
    sp.add_argument("--trials", required=True)
    sp.add_argument("--dbn", help="score DBN top-layer features instead")
    sp.add_argument("--normalize", action="store_true", help="min-max normalize scores")
    sp.add_argument("--out", required=True)

    sp = add("roc", cmd_roc, "ROC curve and EER from scored trials")
    sp.add_argument("--trials", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--svg")

    sp = add("synth-corpus", cmd_synth_corpus, "write a synthetic bimodal corpus")
    sp.add_argument("--out", required=True)
    sp.add_argument("--subjects", type=int, default=20)
    sp.add_argument("--samples", type=int, default=25)
    sp.add_argument("--test-subjects", type=int, default=8)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.config:
            cfg = load_config(_need(args.config, "config file"))
        else:
            cfg = PipelineConfig(preset=args.preset or "desk")
    except errors.ParameterError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    try:
        seed = cfg["run.seed"] if args.seed is None else args.seed
        ctx = Context(args.command, cfg, seed)
        args.func(args, ctx)
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DATA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except errors.BimodalError as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
