"""PCA, serial feature fusion, cosine scoring and ROC/EER evaluation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateRangeError, ParameterError, UndefinedScoreError

PLP_RESAMPLED_FRAMES = 100


@dataclass
class PcaModel:
    mean: np.ndarray  # (D,)
    components: np.ndarray  # (D, R), orthonormal columns
    variances: np.ndarray  # (R,), non-increasing

    blob_kind = "pca"

    @property
    def dim(self):
        return self.components.shape[1]

    def to_state(self):
        return {}, {"mean": self.mean, "components": self.components, "variances": self.variances}

    @classmethod
    def from_state(cls, meta, arrays):
        return cls(arrays["mean"], arrays["components"], arrays["variances"])


def _fix_signs(vectors):
    """Flip each column so its first non-negligible coordinate is positive."""
    out = vectors.copy()
    for j in range(out.shape[1]):
        col = out[:, j]
        nz = np.flatnonzero(np.abs(col) > 1e-12)
        if nz.size and col[nz[0]] < 0:
            out[:, j] = -col
    return out


def pca_fit(data, dim) -> PcaModel:
    """Principal axes of the centered sample covariance in descending eigenvalue order.

    Beyond the data rank the eigenvectors of the (numerically) zero
    eigenvalues are used, sign-fixed so the result is deterministic.
    """
    x = np.atleast_2d(np.asarray(data, dtype=np.float64))
    n, d = x.shape
    if dim < 1 or dim > d:
        raise ParameterError(f"PCA dim {dim} must lie in [1, {d}]")
    if n < dim:
        raise ParameterError(f"{n} rows cannot support {dim} components")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / max(n - 1, 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(-evals, kind="stable")[:dim]
    return PcaModel(mean, _fix_signs(evecs[:, order]), np.maximum(evals[order], 0.0))


def pca_transform(model: PcaModel, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != model.mean.size:
        raise ParameterError(f"input dim {x.shape[-1]} != PCA input dim {model.mean.size}")
    return (x - model.mean) @ model.components


def pca_inverse(model: PcaModel, z) -> np.ndarray:
    return np.asarray(z, dtype=np.float64) @ model.components.T + model.mean


def resample_track(track, n_frames=PLP_RESAMPLED_FRAMES) -> np.ndarray:
    """Linear interpolation of a (frames, dim) track onto ``n_frames`` evenly spaced times."""
    track = np.atleast_2d(np.asarray(track, dtype=np.float64))
    t = track.shape[0]
    if t == 0:
        raise ParameterError("cannot resample an empty track")
    if t == 1:
        return np.repeat(track, n_frames, axis=0)
    src = np.linspace(0.0, 1.0, t)
    dst = np.linspace(0.0, 1.0, n_frames)
    return np.column_stack([np.interp(dst, src, track[:, j]) for j in range(track.shape[1])])


def utterance_vector(track, n_frames=PLP_RESAMPLED_FRAMES) -> np.ndarray:
    """Fixed-length utterance vector: time-resampled track, flattened frame by frame."""
    return resample_track(track, n_frames).ravel()


@dataclass
class FusedVector:
    values: np.ndarray
    n_face: int
    n_speech: int

    @property
    def dim(self):
        return self.values.size

    def face(self):
        return self.values[: self.n_face]

    def speech(self):
        return self.values[self.n_face:]


def serial_fuse(a, b) -> FusedVector:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ParameterError("fused segments must be finite")
    return FusedVector(np.concatenate([a, b]), a.size, b.size)


def cosine_score(x, y) -> float:
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ParameterError("cosine needs equal-length vectors")
    nx, ny = np.linalg.norm(x), np.linalg.norm(y)
    if nx == 0 or ny == 0:
        raise UndefinedScoreError("cosine score of a zero vector")
    return float(np.clip(x @ y / (nx * ny), -1.0, 1.0))


def minmax_normalize(scores) -> np.ndarray:
    s = np.asarray(scores, dtype=np.float64).ravel()
    if s.size < 2:
        raise ParameterError("need at least two scores")
    lo, hi = s.min(), s.max()
    if hi == lo:
        raise DegenerateRangeError("all scores are equal")
    out = (s - lo) / (hi - lo)
    out[s == lo] = 0.0
    out[s == hi] = 1.0
    return out


@dataclass
class TrialScoreSet:
    scores: np.ndarray
    labels: np.ndarray  # 1 same, 0 different

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64).ravel()
        self.labels = np.asarray(self.labels).astype(np.int64).ravel()
        if self.scores.shape != self.labels.shape:
            raise ParameterError("one label per score required")
        if not set(np.unique(self.labels)) <= {0, 1}:
            raise ParameterError("labels must be 0/1")


@dataclass
class RocPoint:
    threshold: float
    tp: int
    fn: int
    fp: int
    tn: int

    @property
    def tpr(self):
        return self.tp / (self.tp + self.fn)

    @property
    def fpr(self):
        return self.fp / (self.fp + self.tn)


@dataclass
class RocCurve:
    points: list
    eer: float
    eer_threshold: float
    eer_index: int  # first point at or past the crossing
    eer_exact: bool  # an operating point sits exactly on TPR == 1 - FPR

    def as_arrays(self):
        return (np.array([p.fpr for p in self.points]), np.array([p.tpr for p in self.points]))


def compute_roc_eer(trials: TrialScoreSet) -> RocCurve:
    """Operating points at every distinct score (accept iff score >= threshold).

    The sweep starts at ``+inf`` (nothing accepted) and lowers the threshold.
    The EER sits where ``FNR - FPR`` first reaches zero; it is read off an
    operating point when one lies exactly on the diagonal and linearly
    interpolated between the two straddling points otherwise.
    """
    s, y = trials.scores, trials.labels
    n_pos, n_neg = int(y.sum()), int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ParameterError("ROC needs both same and different trials")
    order = np.argsort(-s, kind="stable")
    ss, yy = s[order], y[order]
    tp_cum = np.cumsum(yy)
    fp_cum = np.cumsum(1 - yy)
    last = np.r_[np.flatnonzero(ss[1:] != ss[:-1]), ss.size - 1]  # end of each tie group
    points = [RocPoint(float("inf"), 0, n_pos, 0, n_neg)]
    for i in last:
        tp, fp = int(tp_cum[i]), int(fp_cum[i])
        points.append(RocPoint(float(ss[i]), tp, n_pos - tp, fp, n_neg - fp))
    # FNR - FPR, as exact rationals scaled by n_pos * n_neg
    d = [p.fn * n_neg - p.fp * n_pos for p in points]
    k = next(i for i, v in enumerate(d) if v <= 0)
    if d[k] == 0:
        p = points[k]
        return RocCurve(points, p.fp / n_neg, p.threshold, k, True)
    a, b = points[k - 1], points[k]
    fa, fb = a.fn / n_pos - a.fp / n_neg, b.fn / n_pos - b.fp / n_neg
    t = fa / (fa - fb)
    eer = (1 - t) * a.fpr + t * b.fpr
    thr = b.threshold if not np.isfinite(a.threshold) else (1 - t) * a.threshold + t * b.threshold
    return RocCurve(points, float(eer), float(thr), k, False)


def roc_from_counts(counts, threshold=0.0) -> RocCurve:
    """Build trials reproducing given ``(tp, fn, fp, tn)`` at ``threshold`` and sweep them."""
    tp, fn, fp, tn = (int(c) for c in counts)
    lo = threshold - 1.0
    scores = [threshold] * tp + [lo] * fn + [threshold] * fp + [lo] * tn
    labels = [1] * (tp + fn) + [0] * (fp + tn)
    return compute_roc_eer(TrialScoreSet(scores, labels))


def roc_csv(curve: RocCurve, header=None) -> str:
    lines = [header] if header else []
    lines.append(f"# eer={curve.eer:.10g} eer_threshold={curve.eer_threshold:.10g} "
                 f"eer_exact={int(curve.eer_exact)}")
    lines.append("threshold,TP,FN,FP,TN,TPR,FPR")
    for p in curve.points:
        lines.append(f"{p.threshold:.10g},{p.tp},{p.fn},{p.fp},{p.tn},{p.tpr:.10g},{p.fpr:.10g}")
    return "\n".join(lines) + "\n"


def roc_svg(curve: RocCurve, size=320, header=None) -> str:
    fpr, tpr = curve.as_arrays()
    pad = 30
    span = size - 2 * pad
    pts = " ".join(f"{pad + x * span:.2f},{size - pad - y * span:.2f}" for x, y in zip(fpr, tpr))
    comment = f"<!-- {header.lstrip('# ')} -->\n" if header else ""
    return (f"{comment}"
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}">\n'
            f'<rect x="{pad}" y="{pad}" width="{span}" height="{span}" fill="none" stroke="#888"/>\n'
            f'<line x1="{pad}" y1="{pad}" x2="{pad + span}" y2="{pad + span}" stroke="#ccc"/>\n'
            f'<polyline fill="none" stroke="#1f4e9c" stroke-width="2" points="{pts}"/>\n'
            f'<text x="{pad}" y="{pad - 10}" font-size="12">EER = {curve.eer:.4f}</text>\n'
            "</svg>\n")
