"""Integral images, two-rectangle Haar features, AdaBoost stumps and window scanning."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ParameterError

FEATURE_KINDS = ("two_rect_horizontal", "two_rect_vertical")
ERROR_FLOOR = 1e-10


@dataclass
class IntegralImage:
    sums: np.ndarray  # (H+1, W+1), zero first row and column

    @property
    def height(self):
        return self.sums.shape[0] - 1

    @property
    def width(self):
        return self.sums.shape[1] - 1


def _pixels(img):
    return np.asarray(getattr(img, "pixels", img), dtype=np.float64)


def integral_image(img) -> IntegralImage:
    px = _pixels(img)
    if px.ndim != 2 or px.size == 0:
        raise ParameterError("integral image needs a non-empty 2-D image")
    sums = np.zeros((px.shape[0] + 1, px.shape[1] + 1))
    sums[1:, 1:] = px.cumsum(axis=0).cumsum(axis=1)
    return IntegralImage(sums)


def rect_sum(ii: IntegralImage, rect) -> float:
    """Pixel sum over ``rect = (x, y, w, h)`` from four corner lookups."""
    x, y, w, h = (int(v) for v in rect)
    if w < 1 or h < 1 or x < 0 or y < 0 or x + w > ii.width or y + h > ii.height:
        raise ParameterError(f"rectangle {rect} outside {ii.width}x{ii.height} image")
    s = ii.sums
    return float(s[y + h, x + w] - s[y, x + w] - s[y + h, x] + s[y, x])


@dataclass(frozen=True)
class HaarFeature:
    """Two equal rectangles: left/right halves (horizontal) or top/bottom (vertical).

    The value is white minus black, with the left or top half white.
    """

    kind: str
    x: int
    y: int
    w: int
    h: int

    def __post_init__(self):
        if self.kind not in FEATURE_KINDS:
            raise ParameterError(f"unknown Haar feature {self.kind!r}")
        if self.kind == "two_rect_horizontal" and self.w % 2:
            raise ParameterError("horizontal feature width must be even")
        if self.kind == "two_rect_vertical" and self.h % 2:
            raise ParameterError("vertical feature height must be even")

    def rects(self):
        if self.kind == "two_rect_horizontal":
            half = self.w // 2
            return (self.x, self.y, half, self.h), (self.x + half, self.y, half, self.h)
        half = self.h // 2
        return (self.x, self.y, self.w, half), (self.x, self.y + half, self.w, half)

    def fits(self, window):
        ww, wh = window
        return self.x >= 0 and self.y >= 0 and self.x + self.w <= ww and self.y + self.h <= wh


def haar_value(ii: IntegralImage, feature: HaarFeature, offset=(0, 0)) -> float:
    white, black = feature.rects()
    ox, oy = offset
    white = (white[0] + ox, white[1] + oy, white[2], white[3])
    black = (black[0] + ox, black[1] + oy, black[2], black[3])
    return rect_sum(ii, white) - rect_sum(ii, black)


def enumerate_features(window, step=1, size_step=1):
    """All two-rectangle features inside a ``(width, height)`` window."""
    ww, wh = window
    out = []
    for kind in FEATURE_KINDS:
        wstep = 2 * size_step if kind == "two_rect_horizontal" else size_step
        hstep = 2 * size_step if kind == "two_rect_vertical" else size_step
        w0 = 2 if kind == "two_rect_horizontal" else 1
        h0 = 2 if kind == "two_rect_vertical" else 1
        for w in range(w0, ww + 1, wstep):
            for h in range(h0, wh + 1, hstep):
                for y in range(0, wh - h + 1, step):
                    for x in range(0, ww - w + 1, step):
                        out.append(HaarFeature(kind, x, y, w, h))
    return out


def _corner_table(features):
    """Signed corner indices so that value = sums[r, c] @ sign over 8 lookups."""
    rows = np.empty((len(features), 8), dtype=np.intp)
    cols = np.empty((len(features), 8), dtype=np.intp)
    sign = np.tile([1.0, -1.0, -1.0, 1.0, -1.0, 1.0, 1.0, -1.0], (len(features), 1))
    for i, f in enumerate(features):
        (x1, y1, w1, h1), (x2, y2, w2, h2) = f.rects()
        rows[i] = [y1 + h1, y1, y1 + h1, y1, y2 + h2, y2, y2 + h2, y2]
        cols[i] = [x1 + w1, x1 + w1, x1, x1, x2 + w2, x2 + w2, x2, x2]
    return rows, cols, sign


def normalize_window(px):
    """Zero-mean, unit-variance window (constant windows map to zeros)."""
    px = np.asarray(px, dtype=np.float64)
    sd = px.std()
    return (px - px.mean()) / sd if sd > 0 else np.zeros_like(px)


def feature_matrix(windows, features, normalize=True) -> np.ndarray:
    """Feature values, shape (n_windows, n_features)."""
    rows, cols, sign = _corner_table(features)
    out = np.empty((len(windows), len(features)))
    for i, win in enumerate(windows):
        px = _pixels(win)
        if normalize:
            px = normalize_window(px)
        s = integral_image(px).sums
        out[i] = np.sum(s[rows, cols] * sign, axis=1)
    return out


@dataclass
class WeakClassifier:
    feature: HaarFeature | None
    feature_index: int
    threshold: float
    polarity: int

    def predict(self, values):
        """``h = 1`` iff ``p f < p beta``."""
        v = np.asarray(values, dtype=np.float64)
        return (self.polarity * v < self.polarity * self.threshold).astype(np.int8)


@dataclass
class StrongClassifier:
    weak: list
    alphas: list
    window: tuple = (12, 12)
    normalize: bool = True

    blob_kind = "detector"

    def votes(self, feature_values):
        """Weighted vote ``sum lambda_k h_k`` for rows of per-weak feature values."""
        fv = np.atleast_2d(np.asarray(feature_values, dtype=np.float64))
        if not self.weak:
            return np.zeros(fv.shape[0])
        h = np.column_stack([wk.predict(fv[:, k]) for k, wk in enumerate(self.weak)])
        return h @ np.asarray(self.alphas, dtype=np.float64)

    def to_state(self):
        meta = {"window": list(self.window), "normalize": self.normalize,
                "kinds": [FEATURE_KINDS.index(w.feature.kind) if w.feature else -1
                          for w in self.weak]}
        geom = np.array([[w.feature.x, w.feature.y, w.feature.w, w.feature.h] if w.feature
                         else [0, 0, 0, 0] for w in self.weak], dtype=np.int64).reshape(-1, 4)
        arrays = {"geometry": geom,
                  "index": np.array([w.feature_index for w in self.weak], dtype=np.int64),
                  "threshold": np.array([w.threshold for w in self.weak], dtype=np.float64),
                  "polarity": np.array([w.polarity for w in self.weak], dtype=np.int64),
                  "alpha": np.array(self.alphas, dtype=np.float64)}
        return meta, arrays

    @classmethod
    def from_state(cls, meta, arrays):
        weak = []
        for k, kind in enumerate(meta["kinds"]):
            feat = None if kind < 0 else HaarFeature(FEATURE_KINDS[kind],
                                                     *(int(v) for v in arrays["geometry"][k]))
            weak.append(WeakClassifier(feat, int(arrays["index"][k]),
                                       float(arrays["threshold"][k]), int(arrays["polarity"][k])))
        return cls(weak, [float(a) for a in arrays["alpha"]], tuple(meta["window"]),
                   meta["normalize"])


def best_stump(values, labels, weights):
    """Exhaustive weighted-error minimizing stump over every column of ``values``.

    Thresholds are midpoints between consecutive distinct sorted values, plus
    one below the minimum and one above the maximum. Returns
    ``(error, feature_index, threshold, polarity)``.
    """
    values = np.asarray(values, dtype=np.float64)
    n, n_feat = values.shape
    order = np.argsort(values, axis=0, kind="stable")
    sv = np.take_along_axis(values, order, axis=0)
    wp = np.where(labels[order] == 1, weights[order], 0.0)
    wn = np.where(labels[order] == 1, 0.0, weights[order])
    zero = np.zeros((1, n_feat))
    pos_below = np.vstack([zero, np.cumsum(wp, axis=0)])  # (n+1, F): weight strictly below cut i
    neg_below = np.vstack([zero, np.cumsum(wn, axis=0)])
    tp, tn = wp.sum(axis=0), wn.sum(axis=0)
    err_pos = (tp - pos_below) + neg_below  # polarity +1 fires below the cut
    err_neg = pos_below + (tn - neg_below)
    valid = np.ones((n + 1, n_feat), dtype=bool)
    valid[1:n] = sv[1:] > sv[:-1]
    err_pos = np.where(valid, err_pos, np.inf)
    err_neg = np.where(valid, err_neg, np.inf)
    i_pos = np.unravel_index(np.argmin(err_pos), err_pos.shape)
    i_neg = np.unravel_index(np.argmin(err_neg), err_neg.shape)
    if err_pos[i_pos] <= err_neg[i_neg]:
        cut, feat, polarity, err = i_pos[0], i_pos[1], 1, err_pos[i_pos]
    else:
        cut, feat, polarity, err = i_neg[0], i_neg[1], -1, err_neg[i_neg]
    col = sv[:, feat]
    if cut == 0:
        thr = col[0] - 1.0
    elif cut == n:
        thr = col[-1] + 1.0
    else:
        thr = 0.5 * (col[cut - 1] + col[cut])
    return float(max(err, 0.0)), int(feat), float(thr), polarity


def train_adaboost(values, labels, rounds, features=None, window=(12, 12), normalize=True,
                   history=None) -> StrongClassifier:
    """Discrete AdaBoost over decision stumps.

    Initial weights are ``1/(2N)`` for the ``N`` positives and ``1/(2M)`` for the
    ``M`` negatives. Each round normalizes the weights, picks the best stump,
    and multiplies the weights of correctly classified samples by
    ``gamma = eps / (1 - eps)``. ``history`` receives per-round dicts with the
    weak error, the normalized weight sum and the strong classifier's error
    under the initial weights.
    """
    values = np.atleast_2d(np.asarray(values, dtype=np.float64))
    labels = np.asarray(labels).astype(np.int64).ravel()
    if values.shape[0] != labels.size:
        raise ParameterError("one label per sample required")
    if not set(np.unique(labels)) <= {0, 1}:
        raise ParameterError("labels must be 0/1")
    n_pos, n_neg = int(labels.sum()), int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ParameterError("both classes must be present")
    if rounds < 1:
        raise ParameterError("rounds must be >= 1")
    init = np.where(labels == 1, 1.0 / (2 * n_pos), 1.0 / (2 * n_neg))
    w = init.copy()
    weak, alphas = [], []
    votes = np.zeros(labels.size)
    for _ in range(rounds):
        w = w / w.sum()
        err, feat, thr, pol = best_stump(values, labels, w)
        if err >= 0.5:
            if not weak:
                warnings.warn("no stump beats chance; classifier is empty", RuntimeWarning,
                              stacklevel=2)
            break
        eps = max(err, ERROR_FLOOR)
        gamma = eps / (1.0 - eps)
        stump = WeakClassifier(features[feat] if features is not None else None, feat, thr, pol)
        h = stump.predict(values[:, feat])
        weak.append(stump)
        alphas.append(float(np.log(1.0 / gamma)))
        votes += alphas[-1] * h
        if history is not None:
            strong = (votes >= 0.5 * sum(alphas)).astype(int)
            history.append({"weak_error": err, "weight_sum": float(w.sum()),
                            "strong_error": float(init[strong != labels].sum())})
        if err == 0.0:
            break
        w = np.where(h == labels, w * gamma, w)
    return StrongClassifier(weak, alphas, tuple(window), normalize)


def strong_classify(sc: StrongClassifier, feature_values) -> np.ndarray:
    """1 iff ``sum lambda_k h_k >= 1/2 sum lambda_k``; rows hold the per-weak feature values."""
    return (sc.votes(feature_values) >= 0.5 * sum(sc.alphas)).astype(np.int8)


def _window_values(sc: StrongClassifier, ii, sq, x, y):
    """Per-weak feature values of one window, normalized through integral sums."""
    ww, wh = sc.window
    vals = np.array([haar_value(ii, wk.feature, (x, y)) if wk.feature else 0.0 for wk in sc.weak])
    if sc.normalize:
        area = ww * wh
        mean = rect_sum(ii, (x, y, ww, wh)) / area
        var = rect_sum(sq, (x, y, ww, wh)) / area - mean * mean
        sd = np.sqrt(var) if var > 1e-12 else 0.0
        # equal white/black areas cancel the mean term
        vals = vals / sd if sd > 0 else np.zeros_like(vals)
    return vals


def train_detector(positives, negatives, window=(12, 12), rounds=20, step=1, size_step=1,
                   history=None) -> StrongClassifier:
    """AdaBoost over mean/variance-normalized windows of size ``window``."""
    feats = enumerate_features(window, step, size_step)
    wins = [_pixels(p) for p in positives] + [_pixels(q) for q in negatives]
    for px in wins:
        if px.shape != (window[1], window[0]):
            raise ParameterError(f"training window of shape {px.shape} != {window}")
    labels = np.r_[np.ones(len(positives), int), np.zeros(len(negatives), int)]
    values = feature_matrix(wins, feats)
    sc = train_adaboost(values, labels, rounds, feats, window, True, history)
    # re-index so each weak learner reads column k of the scanned value matrix
    for k, wk in enumerate(sc.weak):
        wk.feature_index = k
    return sc


def mine_hard_negatives(sc: StrongClassifier, scenes, boxes, step=1, max_iou=0.5):
    """Accepted scan windows overlapping the annotated box by less than ``max_iou``."""
    ww, wh = sc.window
    out = []
    for img, box in zip(scenes, boxes):
        px = _pixels(img)
        for b in scan_detect(px, sc, step=step, nms_iou=None):
            if iou(b, box) < max_iou:
                x, y = int(b[0]), int(b[1])
                out.append(px[y:y + wh, x:x + ww].copy())
    return out


def _resize(px, scale):
    from scipy.ndimage import zoom

    return zoom(px, 1.0 / scale, order=1, mode="nearest", grid_mode=True)


def iou(a, b) -> float:
    ax, ay, aw, ah = a[:4]
    bx, by, bw, bh = b[:4]
    iw = max(0.0, min(ax + aw, bx + bw) - max(ax, bx))
    ih = max(0.0, min(ay + ah, by + bh) - max(ay, by))
    inter = iw * ih
    union = aw * ah + bw * bh - inter
    return inter / union if union > 0 else 0.0


def scan_detect(img, sc: StrongClassifier, window=None, step=2, scales=(1.0,), nms_iou=0.3):
    """Accepted windows as ``(x, y, w, h, score)`` in image coordinates.

    ``score = sum lambda_k h_k / sum lambda_k``. Boxes are ordered by score
    (scan order breaks ties) and greedily suppressed when their IoU with a
    kept box exceeds ``nms_iou``; ``nms_iou=None`` keeps every accepted box.
    """
    window = tuple(window or sc.window)
    if window != tuple(sc.window):
        raise ParameterError(f"classifier window {sc.window} != scan window {window}")
    base = _pixels(img)
    total = sum(sc.alphas)
    found = []
    for scale in scales:
        px = base if scale == 1.0 else _resize(base, scale)
        h, w = px.shape
        if window[0] > w or window[1] > h:
            continue
        ii = integral_image(px)
        sq = integral_image(px * px)
        for y in range(0, h - window[1] + 1, step):
            for x in range(0, w - window[0] + 1, step):
                v = sc.votes(_window_values(sc, ii, sq, x, y))[0]
                if v >= 0.5 * total:
                    score = v / total if total > 0 else 1.0
                    found.append((x * scale, y * scale, window[0] * scale, window[1] * scale,
                                  float(score)))
    if nms_iou is None:
        return found
    order = sorted(range(len(found)), key=lambda i: -found[i][4])
    kept = []
    for i in order:
        if all(iou(found[i], found[j]) <= nms_iou for j in kept):
            kept.append(i)
    return [found[i] for i in kept]


def format_boxes_csv(boxes, header=None) -> str:
    lines = [header] if header else []
    lines.append("x,y,w,h,score")
    lines += [f"{b[0]:.6g},{b[1]:.6g},{b[2]:.6g},{b[3]:.6g},{b[4]:.6g}" for b in boxes]
    return "\n".join(lines) + "\n"
