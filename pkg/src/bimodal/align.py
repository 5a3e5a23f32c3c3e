"""Supervised-descent landmark regression and least-squares affine alignment."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError, RankError
from .io import GrayImage

# eyes, nose tip, mouth corners in a 128x128 frame
CANONICAL_TEMPLATE = np.array([[45.0, 52.0], [83.0, 52.0], [64.0, 74.0], [50.0, 95.0],
                               [78.0, 95.0]])
CANONICAL_SIZE = (128, 128)


def _pixels(img):
    return np.asarray(getattr(img, "pixels", img), dtype=np.float64)


def shape_descriptor(img, landmarks, patch=11) -> np.ndarray:
    """Concatenated ``patch x patch`` intensity patches, each mean-subtracted and L2-normalized.

    Patch reads outside the image clamp to the nearest border pixel.
    """
    px = _pixels(img)
    pts = np.asarray(landmarks, dtype=np.float64).reshape(-1, 2)
    h, w = px.shape
    r = patch // 2
    offs = np.arange(patch) - r
    out = np.empty((pts.shape[0], patch * patch))
    for i, (x, y) in enumerate(pts):
        cx, cy = int(np.rint(np.clip(x, 0, w - 1))), int(np.rint(np.clip(y, 0, h - 1)))
        rows = np.clip(cy + offs, 0, h - 1)
        cols = np.clip(cx + offs, 0, w - 1)
        p = px[np.ix_(rows, cols)].ravel()
        p = p - p.mean()
        norm = np.linalg.norm(p)
        # near-constant patches carry no signal; treat round-off residue as zero
        out[i] = p / norm if norm > 1e-9 * max(1.0, np.abs(px).max()) else 0.0
    return out.ravel()


def _fit_box(unit_shape, box):
    x, y, w, h = box
    return unit_shape * np.array([w, h]) + np.array([x, y])


@dataclass
class SdmModel:
    stages: list  # [(C (2n, d), b (2n,))]
    x0: np.ndarray  # (n, 2) mean shape in unit-box coordinates
    patch: int = 11
    stage_errors: list = field(default_factory=list)

    blob_kind = "sdm"

    @property
    def n_landmarks(self):
        return self.x0.shape[0]

    def to_state(self):
        meta = {"patch": self.patch, "n_stages": len(self.stages),
                "stage_errors": [float(e) for e in self.stage_errors]}
        arrays = {"x0": self.x0}
        for k, (c, b) in enumerate(self.stages):
            arrays[f"C{k:03d}"] = c
            arrays[f"b{k:03d}"] = b
        return meta, arrays

    @classmethod
    def from_state(cls, meta, arrays):
        stages = [(arrays[f"C{k:03d}"], arrays[f"b{k:03d}"]) for k in range(meta["n_stages"])]
        return cls(stages, arrays["x0"], meta["patch"], meta["stage_errors"])


def _image_box(img):
    px = _pixels(img)
    return (0.0, 0.0, float(px.shape[1]), float(px.shape[0]))


def _rms(shapes, truth):
    """Root mean squared landmark distance, averaged over landmarks and samples."""
    d = np.asarray(shapes) - np.asarray(truth)
    return float(np.sqrt(np.mean(np.sum(d * d, axis=-1))))


def _regress(phi, target):
    """Minimum-norm least-squares ``[C b]`` for ``target ~ phi C' + b``."""
    design = np.hstack([phi, np.ones((phi.shape[0], 1))])
    coef, _, rank, _ = np.linalg.lstsq(design, target, rcond=None)
    if rank < design.shape[1]:
        warnings.warn(f"SDM regression is rank deficient ({rank} < {design.shape[1]}); "
                      "using the minimum-norm solution", RuntimeWarning, stacklevel=3)
    return coef[:-1].T, coef[-1]


def sdm_train(images, true_shapes, x0, stages=4, boxes=None, patch=11,
              descriptor=None) -> SdmModel:
    """Train a cascade of linear descent maps.

    ``x0`` is the initial shape in unit-box coordinates (placed in each
    sample's box, the full image by default). Stage ``k`` regresses the
    remaining displacement on the descriptors at the current shapes, then
    moves every training shape by its prediction before the next stage.
    ``descriptor(img, shape)`` overrides the patch descriptor.
    """
    images = list(images)
    truth = [np.asarray(s, dtype=np.float64).reshape(-1, 2) for s in true_shapes]
    if len(images) < 2 or len(images) != len(truth):
        raise ParameterError("need at least two images with one shape each")
    x0 = np.asarray(x0, dtype=np.float64).reshape(-1, 2)
    if any(t.shape != x0.shape for t in truth):
        raise ParameterError("landmark counts differ")
    boxes = boxes or [_image_box(im) for im in images]
    describe = descriptor or (lambda im, s: shape_descriptor(im, s, patch))
    current = [_fit_box(x0, b) for b in boxes]
    errors = [_rms(current, truth)]
    fitted = []
    for _ in range(stages):
        phi = np.array([describe(im, s) for im, s in zip(images, current)])
        delta = np.array([(t - s).ravel() for t, s in zip(truth, current)])
        c, b = _regress(phi, delta)
        fitted.append((c, b))
        step = phi @ c.T + b
        current = [s + d.reshape(-1, 2) for s, d in zip(current, step)]
        errors.append(_rms(current, truth))
    return SdmModel(fitted, x0, patch, errors)


def sdm_predict(model: SdmModel, img, box=None, descriptor=None) -> np.ndarray:
    """Apply every stage's update ``x += C phi(x) + b`` starting from ``x0`` in ``box``."""
    describe = descriptor or (lambda im, s: shape_descriptor(im, s, model.patch))
    shape = _fit_box(model.x0, box or _image_box(img))
    for c, b in model.stages:
        shape = shape + (c @ describe(img, shape) + b).reshape(-1, 2)
    return shape


@dataclass
class AffineTransform:
    """``x' = a x + b y + c``, ``y' = d x + e y + f``."""

    a: float
    b: float
    c: float
    d: float
    e: float
    f: float

    @classmethod
    def identity(cls):
        return cls(1.0, 0.0, 0.0, 0.0, 1.0, 0.0)

    def matrix(self):
        return np.array([[self.a, self.b, self.c], [self.d, self.e, self.f], [0.0, 0.0, 1.0]])

    @classmethod
    def from_matrix(cls, m):
        return cls(*(float(v) for v in np.asarray(m)[:2].ravel()))

    def apply(self, points):
        p = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        return p @ self.matrix()[:2, :2].T + np.array([self.c, self.f])

    def determinant(self):
        return self.a * self.e - self.b * self.d

    def inverse(self):
        if abs(self.determinant()) < 1e-12:
            raise RankError("affine transform is singular")
        return AffineTransform.from_matrix(np.linalg.inv(self.matrix()))

    def compose(self, other):
        """``self`` applied after ``other``."""
        return AffineTransform.from_matrix(self.matrix() @ other.matrix())


def estimate_affine(src, dst) -> AffineTransform:
    """Least-squares affine map sending ``src`` points onto ``dst``."""
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    if src.shape != dst.shape:
        raise ParameterError("point sets differ in size")
    if src.shape[0] < 3:
        raise RankError("affine estimation needs at least 3 point pairs")
    k = np.hstack([src, np.ones((src.shape[0], 1))])
    sv = np.linalg.svd(k, compute_uv=False)
    if sv[-1] <= 1e-10 * sv[0]:
        raise RankError("affine correspondences are collinear")
    sol, *_ = np.linalg.lstsq(k, dst, rcond=None)  # (3, 2): columns for x', y'
    return AffineTransform(*(float(v) for v in sol.T.ravel()))


def affine_residual(t: AffineTransform, src, dst) -> float:
    return float(np.sum((t.apply(src) - np.asarray(dst, dtype=np.float64).reshape(-1, 2)) ** 2))


def bilinear_sample(px, xs, ys):
    """Bilinear reads at real coordinates; a read needing any tap outside the image is 0."""
    h, w = px.shape
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    fx, fy = xs - x0, ys - y0
    out = np.zeros(xs.shape)
    outside = np.zeros(xs.shape, dtype=bool)
    for dy, wy in ((0, 1.0 - fy), (1, fy)):
        for dx, wx in ((0, 1.0 - fx), (1, fx)):
            xi, yi = x0 + dx, y0 + dy
            wgt = wx * wy
            ok = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            # zero-weight taps may fall outside without affecting the read
            outside |= ~ok & (wgt > 0)
            out += wgt * np.where(ok, px[np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)], 0.0)
    return np.where(outside, 0.0, out)


def warp_image(img, t: AffineTransform, out_size=None) -> GrayImage:
    """Output pixel ``q`` reads the input at ``t^-1(q)`` with bilinear interpolation."""
    px = _pixels(img)
    out_w, out_h = out_size or (px.shape[1], px.shape[0])
    inv = t.inverse()
    ys, xs = np.mgrid[0:out_h, 0:out_w].astype(np.float64)
    pts = inv.apply(np.column_stack([xs.ravel(), ys.ravel()]))
    vals = bilinear_sample(px, pts[:, 0], pts[:, 1]).reshape(out_h, out_w)
    return GrayImage(np.clip(vals, 0.0, 255.0))


def align_face(img, landmarks, template=CANONICAL_TEMPLATE, out_size=CANONICAL_SIZE):
    """Warp ``img`` so its landmarks land on the canonical template."""
    t = estimate_affine(landmarks, template)
    return warp_image(img, t, out_size), t
