"""Readers and writers for audio, images, manifests and model blobs.

Every other module works on the in-memory types defined here
(:class:`AudioBuffer`, :class:`GrayImage`, :class:`DatasetManifest`) and
persists trained models through :func:`serialize_model` /
:func:`deserialize_model`.
"""
from __future__ import annotations

import io as _io
import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    FormatError,
    IntegrityError,
    ManifestError,
    ParameterError,
    UnsupportedError,
    VersionError,
)

__all__ = [
    "AudioBuffer",
    "GrayImage",
    "ManifestEntry",
    "DatasetManifest",
    "ModelBlob",
    "parse_wav",
    "write_wav",
    "read_wav",
    "parse_pgm",
    "write_pgm",
    "read_pgm",
    "load_manifest",
    "dump_manifest",
    "serialize_model",
    "deserialize_model",
    "save_model",
    "load_model",
    "BLOB_VERSION",
]


@dataclass
class AudioBuffer:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).ravel()
        if int(self.sample_rate) <= 0:
            raise ParameterError("sample_rate must be positive")
        self.sample_rate = int(self.sample_rate)
        if not np.all(np.isfinite(self.samples)):
            raise ParameterError("audio samples must be finite")

    def __len__(self):
        return self.samples.size

    @property
    def duration(self):
        return self.samples.size / self.sample_rate


@dataclass
class GrayImage:
    """Row-major grayscale image; ``pixels`` has shape (height, width)."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 2 or px.size == 0:
            raise ParameterError("image must be a non-empty 2-D array")
        if np.any(px < 0) or np.any(px > 255) or not np.all(np.isfinite(px)):
            raise ParameterError("pixel values must lie in [0, 255]")
        self.pixels = px

    @classmethod
    def from_flat(cls, width, height, values):
        values = np.asarray(values, dtype=np.float64)
        if values.size != width * height:
            raise ParameterError("pixel count does not match width*height")
        return cls(values.reshape(height, width))

    @property
    def width(self):
        return self.pixels.shape[1]

    @property
    def height(self):
        return self.pixels.shape[0]


# --------------------------------------------------------------------------
# WAV

_WAVE_FORMAT_PCM = 1
_WAVE_FORMAT_IEEE_FLOAT = 3
_WAVE_FORMAT_EXTENSIBLE = 0xFFFE


def _chunks(data):
    pos = 12
    while pos + 8 <= len(data):
        cid, size = struct.unpack_from("<4sI", data, pos)
        body = data[pos + 8:pos + 8 + size]
        if len(body) < size:
            raise FormatError(f"chunk {cid!r} truncated")
        yield cid, body
        pos += 8 + size + (size & 1)


def parse_wav(data: bytes) -> AudioBuffer:
    """Decode a RIFF/WAVE byte string into a mono :class:`AudioBuffer`.

    Supports 8-bit unsigned and 16-bit signed PCM as well as 32-bit IEEE
    float. Multi-channel audio is averaged to mono; integer samples are
    scaled to [-1, 1).
    """
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise FormatError("not a RIFF/WAVE stream")
    fmt = None
    payload = None
    for cid, body in _chunks(data):
        if cid == b"fmt ":
            if len(body) < 16:
                raise FormatError("fmt chunk too short")
            fmt = struct.unpack_from("<HHIIHH", body, 0)
            if fmt[0] == _WAVE_FORMAT_EXTENSIBLE:
                if len(body) < 26:
                    raise FormatError("extensible fmt chunk too short")
                sub = struct.unpack_from("<H", body, 24)[0]
                fmt = (sub,) + fmt[1:]
        elif cid == b"data":
            payload = body
    if fmt is None:
        raise FormatError("missing fmt chunk")
    if payload is None:
        raise FormatError("missing data chunk")
    codec, channels, rate, _, block_align, bits = fmt
    if channels < 1 or rate < 1:
        raise FormatError("invalid channel count or sample rate")
    if codec == _WAVE_FORMAT_PCM and bits == 16:
        x = np.frombuffer(payload[: len(payload) // 2 * 2], dtype="<i2") / 32768.0
    elif codec == _WAVE_FORMAT_PCM and bits == 8:
        x = (np.frombuffer(payload, dtype=np.uint8).astype(np.float64) - 128.0) / 128.0
    elif codec == _WAVE_FORMAT_IEEE_FLOAT and bits == 32:
        x = np.frombuffer(payload[: len(payload) // 4 * 4], dtype="<f4").astype(np.float64)
    else:
        raise UnsupportedError(f"unsupported codec {codec} with {bits} bits")
    n_frames = x.size // channels
    x = x[: n_frames * channels].reshape(n_frames, channels).mean(axis=1)
    if not np.all(np.isfinite(x)):
        raise FormatError("non-finite samples")
    return AudioBuffer(x, rate)


def write_wav(audio: AudioBuffer) -> bytes:
    """Encode mono 16-bit PCM. Samples are clipped to the representable range."""
    pcm = np.clip(np.round(audio.samples * 32768.0), -32768, 32767).astype("<i2")
    body = pcm.tobytes()
    fmt = struct.pack("<HHIIHH", _WAVE_FORMAT_PCM, 1, audio.sample_rate,
                      audio.sample_rate * 2, 2, 16)
    out = _io.BytesIO()
    out.write(b"RIFF")
    out.write(struct.pack("<I", 4 + 8 + len(fmt) + 8 + len(body)))
    out.write(b"WAVE")
    out.write(b"fmt " + struct.pack("<I", len(fmt)) + fmt)
    out.write(b"data" + struct.pack("<I", len(body)) + body)
    return out.getvalue()


def read_wav(path) -> AudioBuffer:
    return parse_wav(Path(path).read_bytes())


# --------------------------------------------------------------------------
# PGM

def _pgm_tokens(data, count, pos):
    """Read ``count`` whitespace-separated header tokens, skipping comments."""
    tokens = []
    n = len(data)
    while len(tokens) < count:
        while pos < n and data[pos:pos + 1].isspace():
            pos += 1
        if pos < n and data[pos:pos + 1] == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise FormatError("truncated PGM header")
        tokens.append(data[start:pos])
    return tokens, pos


def parse_pgm(data: bytes) -> GrayImage:
    """Decode a P2 (ASCII) or P5 (binary) PGM with maxval <= 255."""
    magic = data[:2]
    if magic not in (b"P2", b"P5"):
        raise FormatError(f"unsupported PGM magic {magic!r}")
    try:
        (w, h, maxval), pos = _pgm_tokens(data, 3, 2)
        width, height, maxval = int(w), int(h), int(maxval)
    except ValueError as exc:
        raise FormatError(f"bad PGM header: {exc}") from None
    if width <= 0 or height <= 0:
        raise FormatError("PGM dimensions must be positive")
    if not 0 < maxval <= 255:
        raise UnsupportedError(f"maxval {maxval} not supported")
    count = width * height
    if magic == b"P5":
        # exactly one whitespace byte separates the header from the raster
        raster = data[pos + 1:]
        if len(raster) != count:
            raise FormatError(f"expected {count} pixels, got {len(raster)}")
        values = np.frombuffer(raster, dtype=np.uint8).astype(np.float64)
    else:
        try:
            values = np.array([int(t) for t in data[pos:].split()], dtype=np.float64)
        except ValueError:
            raise FormatError("non-integer pixel value") from None
        if values.size != count:
            raise FormatError(f"expected {count} pixels, got {values.size}")
    if np.any(values > maxval):
        raise FormatError("pixel value exceeds maxval")
    return GrayImage.from_flat(width, height, values)


def write_pgm(image: GrayImage) -> bytes:
    """Encode as binary P5; pixels are rounded to 8 bits."""
    px = np.clip(np.round(image.pixels), 0, 255).astype(np.uint8)
    header = f"P5\n{image.width} {image.height}\n255\n".encode("ascii")
    return header + px.tobytes()


def read_pgm(path) -> GrayImage:
    return parse_pgm(Path(path).read_bytes())


# --------------------------------------------------------------------------
# Manifests

MODALITIES = ("audio", "image")
SPLITS = ("train", "train_test", "test")


@dataclass(frozen=True)
class ManifestEntry:
    subject_id: str
    modality: str
    path: str
    split: str


@dataclass
class DatasetManifest:
    entries: list = field(default_factory=list)
    root: Path | None = None

    def __post_init__(self):
        seen = set()
        for e in self.entries:
            if not e.subject_id:
                raise ManifestError("empty subject_id")
            if e.path in seen:
                raise ManifestError(f"duplicate path {e.path!r}")
            seen.add(e.path)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def select(self, modality=None, splits=None):
        return [e for e in self.entries
                if (modality is None or e.modality == modality)
                and (splits is None or e.split in splits)]

    def resolve(self, entry):
        p = Path(entry.path)
        if self.root is not None and not p.is_absolute():
            p = self.root / p
        return p


def load_manifest(text: str, root=None) -> DatasetManifest:
    """Parse ``subject_id,modality,path,split`` lines; ``#`` starts a comment line."""
    entries = []
    seen = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 4:
            raise ManifestError(f"expected 4 fields, got {len(parts)}", lineno)
        subject, modality, path, split = parts
        if not subject:
            raise ManifestError("empty subject_id", lineno)
        if modality not in MODALITIES:
            raise ManifestError(f"unknown modality {modality!r}", lineno)
        if split not in SPLITS:
            raise ManifestError(f"unknown split {split!r}", lineno)
        if path in seen:
            raise ManifestError(f"duplicate path {path!r}", lineno)
        seen.add(path)
        entries.append(ManifestEntry(subject, modality, path, split))
    return DatasetManifest(entries, None if root is None else Path(root))


def dump_manifest(manifest: DatasetManifest) -> str:
    return "".join(f"{e.subject_id},{e.modality},{e.path},{e.split}\n"
                   for e in manifest.entries)


# --------------------------------------------------------------------------
# Model blobs
#
# Layout (little endian):
#   "BMID" | u32 version | u8 kind | payload
# payload:
#   u32 crc32(body) | body
# body:
#   u32 meta_len | meta (UTF-8 JSON, sorted keys) | u32 n_arrays |
#   per array: u16 name_len | name | u8 dtype | u8 ndim | u32 dims[ndim] | raw

MAGIC = b"BMID"
BLOB_VERSION = 1
KINDS = ("gmm", "tv", "network", "detector", "sdm", "pca")
_DTYPES = {0: "<f8", 1: "<i8", 2: "u1"}
_DTYPE_CODES = {np.dtype("<f8"): 0, np.dtype("<i8"): 1, np.dtype("u1"): 2}


@dataclass
class ModelBlob:
    kind: str
    version: int
    payload: bytes

    def to_bytes(self) -> bytes:
        return MAGIC + struct.pack("<IB", self.version, KINDS.index(self.kind)) + self.payload

    @classmethod
    def from_bytes(cls, data: bytes) -> "ModelBlob":
        if len(data) < 9 or data[:4] != MAGIC:
            raise FormatError("not a model blob (bad magic)")
        version, kind = struct.unpack_from("<IB", data, 4)
        if kind >= len(KINDS):
            raise FormatError(f"unknown model kind tag {kind}")
        return cls(KINDS[kind], version, data[9:])


def _encode_body(meta, arrays):
    out = _io.BytesIO()
    mb = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    out.write(struct.pack("<I", len(mb)))
    out.write(mb)
    out.write(struct.pack("<I", len(arrays)))
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        if arr.dtype.kind == "f":
            arr = arr.astype("<f8")
        elif arr.dtype.kind in "iub" and arr.dtype != np.uint8:
            arr = arr.astype("<i8")
        nb = name.encode("utf-8")
        out.write(struct.pack("<H", len(nb)))
        out.write(nb)
        out.write(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
        out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.write(np.ascontiguousarray(arr).tobytes())
    return out.getvalue()


def _decode_body(body):
    try:
        pos = 0
        (mlen,) = struct.unpack_from("<I", body, pos)
        pos += 4
        meta = json.loads(body[pos:pos + mlen].decode("utf-8"))
        pos += mlen
        (count,) = struct.unpack_from("<I", body, pos)
        pos += 4
        arrays = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos:pos + nlen].decode("utf-8")
            pos += nlen
            code, ndim = struct.unpack_from("<BB", body, pos)
            pos += 2
            shape = struct.unpack_from(f"<{ndim}I", body, pos)
            pos += 4 * ndim
            dt = np.dtype(_DTYPES[code])
            nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            if pos + nbytes > len(body):
                raise IntegrityError("array data truncated")
            arrays[name] = np.frombuffer(body[pos:pos + nbytes], dtype=dt).reshape(shape).copy()
            pos += nbytes
        if pos != len(body):
            raise IntegrityError("trailing bytes in payload")
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError, KeyError) as exc:
        raise IntegrityError(f"corrupted payload: {exc}") from None
    return meta, arrays


def _model_classes():
    from .align import SdmModel
    from .detect import StrongClassifier
    from .fusion import PcaModel
    from .gmm import GmmModel
    from .ivector import TotalVariabilitySpace
    from .nn import LayeredNetwork
    from .rbm import DbnStack

    return {c.__name__: c for c in (GmmModel, TotalVariabilitySpace, LayeredNetwork,
                                    DbnStack, StrongClassifier, SdmModel, PcaModel)}


def serialize_model(model, provenance=None) -> ModelBlob:
    """Pack any model exposing ``blob_kind``/``to_state`` into a :class:`ModelBlob`.

    ``provenance`` (command, config hash, seed) is stored in the metadata
    block so every artifact records what produced it.
    """
    meta, arrays = model.to_state()
    meta = dict(meta, __class__=type(model).__name__)
    if provenance:
        meta["__provenance__"] = dict(provenance)
    body = _encode_body(meta, arrays)
    payload = struct.pack("<I", zlib.crc32(body)) + body
    return ModelBlob(model.blob_kind, BLOB_VERSION, payload)


def deserialize_model(blob: ModelBlob, with_provenance=False):
    if blob.version != BLOB_VERSION:
        raise VersionError(f"blob version {blob.version}, expected {BLOB_VERSION}")
    if len(blob.payload) < 4:
        raise IntegrityError("empty payload")
    (crc,) = struct.unpack_from("<I", blob.payload, 0)
    body = blob.payload[4:]
    if zlib.crc32(body) != crc:
        raise IntegrityError("checksum mismatch")
    meta, arrays = _decode_body(body)
    cls = _model_classes().get(meta.pop("__class__", None))
    if cls is None or cls.blob_kind != blob.kind:
        raise IntegrityError("payload class does not match blob kind")
    provenance = meta.pop("__provenance__", None)
    model = cls.from_state(meta, arrays)
    return (model, provenance) if with_provenance else model


def save_model(model, path, provenance=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(serialize_model(model, provenance).to_bytes())


def load_model(path, with_provenance=False):
    return deserialize_model(ModelBlob.from_bytes(Path(path).read_bytes()), with_provenance)
