"""Flat ``namespace.key=value`` pipeline configuration with desk- and paper-scale presets."""
from __future__ import annotations

import hashlib

from .errors import ParameterError

DESK_DEFAULTS = {
    "audio.frame_ms": 25.0,
    "audio.hop_ms": 20.0,
    "audio.pre_emphasis": 0.95,
    "audio.mfcc_order": 13,
    "audio.n_filters": 24,
    "audio.k_delta": 2,
    "audio.filter_domain": "magnitude",
    "audio.literal_window": False,
    "audio.plp_order": 12,
    "ubm.components": 16,
    "ubm.iters": 20,
    "ubm.floor_ratio": 1e-4,
    "map.relevance": 16.0,
    "tv.rank": 8,
    "tv.iters": 10,
    "tv.paper_literal": False,
    "pca.dim": 16,
    "pca.frames": 100,
    "face.input_size": 20,
    "face.embedding_dim": 32,
    "face.channels": 8,
    "face.hidden": 64,
    "face.epochs": 15,
    "face.batch_size": 32,
    "face.rate": 0.002,
    "dbn.speaker_topology": "64,64,64,64",
    "dbn.fusion_topology": "64,64,64,64",
    "dbn.epochs": 5,
    "dbn.rate": 0.01,
    "dbn.finetune_epochs": 20,
    "dbn.batch_size": 32,
    "nn.optimizer": "sgd",
    "nn.rate": 0.005,
    "nn.step_size": 0,
    "nn.gamma": 1.0,
    "detect.window": 12,
    "detect.rounds": 20,
    "detect.step": 2,
    "detect.scales": "1.0",
    "detect.nms_iou": 0.3,
    "sdm.stages": 4,
    "sdm.patch": 11,
    "run.seed": 0,
}

# dimensions used by the original large-corpus system
PAPER_OVERRIDES = {
    "ubm.components": 2048,
    "tv.rank": 600,
    "pca.dim": 500,
    "face.input_size": 128,
    "face.embedding_dim": 2048,
    "dbn.speaker_topology": "2048,2048,2048,2048",
    "dbn.fusion_topology": "3000,3000,3000,3000",
}


def _coerce(key, raw, default):
    if isinstance(default, bool):
        low = str(raw).strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ParameterError(f"{key}: expected a boolean, got {raw!r}")
    try:
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ParameterError(f"{key}: cannot parse {raw!r}") from None
    return str(raw).strip()


class PipelineConfig:
    """Resolved configuration; read values with ``cfg["ns.key"]``."""

    def __init__(self, values=None, preset="desk"):
        if preset not in ("desk", "paper"):
            raise ParameterError(f"unknown preset {preset!r}")
        self._values = dict(DESK_DEFAULTS)
        if preset == "paper":
            self._values.update(PAPER_OVERRIDES)
        self.preset = preset
        for key, raw in (values or {}).items():
            self.set(key, raw)
        self._validate()

    def set(self, key, raw):
        if key not in DESK_DEFAULTS:
            raise ParameterError(f"unknown config key {key!r}")
        self._values[key] = _coerce(key, raw, DESK_DEFAULTS[key])

    def __getitem__(self, key):
        return self._values[key]

    def topology(self, key):
        return tuple(int(v) for v in str(self._values[key]).split(",") if v.strip())

    def floats(self, key):
        return tuple(float(v) for v in str(self._values[key]).split(",") if v.strip())

    def _validate(self):
        v = self._values
        for key in ("audio.frame_ms", "audio.hop_ms", "ubm.components", "tv.rank", "pca.dim",
                    "face.embedding_dim", "detect.window", "pca.frames"):
            if not v[key] > 0:
                raise ParameterError(f"{key} must be positive")
        if not 0.0 <= v["audio.pre_emphasis"] <= 1.0:
            raise ParameterError("audio.pre_emphasis must lie in [0, 1]")
        if v["audio.filter_domain"] not in ("magnitude", "power"):
            raise ParameterError("audio.filter_domain must be magnitude or power")
        if v["nn.optimizer"] not in ("sgd", "adagrad", "rmsprop"):
            raise ParameterError("nn.optimizer must be sgd, adagrad or rmsprop")

    def dumps(self) -> str:
        lines = [f"preset={self.preset}"]
        lines += [f"{k}={_render(self._values[k])}" for k in sorted(self._values)]
        return "\n".join(lines) + "\n"

    def hash(self) -> str:
        return hashlib.sha256(self.dumps().encode("utf-8")).hexdigest()[:16]

    def speech_dim(self):
        """i-vector plus PCA-reduced PLP utterance vector."""
        return self["tv.rank"] + self["pca.dim"]

    def fused_dim(self):
        return self["face.embedding_dim"] + self.speech_dim()


def _render(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def parse_config(text: str) -> PipelineConfig:
    """``key=value`` lines; ``#`` starts a comment; an optional ``preset=`` line picks the base."""
    values, preset = {}, "desk"
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParameterError(f"config line {n}: expected key=value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key == "preset":
            preset = raw
        else:
            values[key] = raw
    return PipelineConfig(values, preset)


def load_config(path=None) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())
