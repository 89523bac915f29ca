"""Shared domain types and on-disk artifact formats.

Tensors (embeddings, features, weights, checkpoint parameters) are stored in
the TSR format: one UTF-8 JSON header line followed by a raw little-endian
float32 row-major payload. Everything else is JSON.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np

FORMAT_VERSION = 1
RUN_SUBDIRS = ("bundle", "embeddings", "checkpoints", "samples", "reports")


class TensorFormatError(ValueError):
    """Base class for TSR read/write failures."""


class CorruptHeaderError(TensorFormatError):
    pass


class PayloadSizeError(TensorFormatError):
    pass


class UnsupportedDtypeError(TensorFormatError):
    pass


class FormatVersionError(TensorFormatError):
    pass


def _as_f32(tensor: Any) -> np.ndarray:
    if hasattr(tensor, "detach"):
        tensor = tensor.detach().cpu().numpy()
    arr = np.asarray(tensor)
    if arr.dtype.kind not in "fiu":
        raise UnsupportedDtypeError(f"cannot store dtype {arr.dtype} as f32")
    arr = np.asarray(arr, dtype="<f4", order="C")  # keeps 0-d shape, unlike ascontiguousarray
    if not np.all(np.isfinite(arr)):
        raise ValueError("refusing to store a tensor with non-finite entries")
    return arr


def encode_tensor(tensor: Any) -> bytes:
    arr = _as_f32(tensor)
    header = {
        "byte_order": "little",
        "dtype": "f32",
        "format_version": FORMAT_VERSION,
        "shape": list(arr.shape),
    }
    line = json.dumps(header, sort_keys=True, separators=(",", ":"))
    return line.encode("utf-8") + b"\n" + arr.tobytes(order="C")


def decode_tensor(blob: bytes) -> np.ndarray:
    newline = blob.find(b"\n")
    if newline < 0:
        raise CorruptHeaderError("missing header terminator")
    try:
        header = json.loads(blob[:newline].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptHeaderError(f"unparseable header: {exc}") from None
    if not isinstance(header, dict):
        raise CorruptHeaderError("header is not a JSON object")
    version = header.get("format_version")
    if not isinstance(version, int):
        raise CorruptHeaderError("header lacks an integer format_version")
    if version > FORMAT_VERSION:
        raise FormatVersionError(f"format_version {version} > supported {FORMAT_VERSION}")
    if header.get("dtype") != "f32":
        raise UnsupportedDtypeError(f"unsupported dtype {header.get('dtype')!r}")
    if header.get("byte_order") != "little":
        raise UnsupportedDtypeError(f"unsupported byte order {header.get('byte_order')!r}")
    shape = header.get("shape")
    if not isinstance(shape, list) or not all(isinstance(s, int) and s >= 0 for s in shape):
        raise CorruptHeaderError(f"bad shape {shape!r}")
    payload = blob[newline + 1:]
    expected = int(np.prod(shape, dtype=np.int64)) * 4
    if len(payload) != expected:
        raise PayloadSizeError(
            f"shape {shape} needs {expected} payload bytes, found {len(payload)}"
        )
    return np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)


def save_tensor(path: str | os.PathLike, tensor: Any) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_tensor(tensor))
    return path


def load_tensor(path: str | os.PathLike) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


def tensor_hash(tensor: Any) -> str:
    """sha256 of the f32 little-endian bytes plus shape."""
    arr = _as_f32(tensor)
    h = hashlib.sha256(json.dumps(list(arr.shape)).encode())
    h.update(arr.tobytes(order="C"))
    return h.hexdigest()


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def config_hash(run_config: Mapping[str, Any]) -> str:
    return hashlib.sha256(canonical_json(run_config).encode("utf-8")).hexdigest()


def write_json(path: str | os.PathLike, obj: Any) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return path


def read_json(path: str | os.PathLike) -> Any:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def check_version(meta: Mapping[str, Any], what: str) -> None:
    version = meta.get("format_version")
    if not isinstance(version, int):
        raise FormatVersionError(f"{what}: missing format_version")
    if version > FORMAT_VERSION:
        raise FormatVersionError(f"{what}: format_version {version} > supported {FORMAT_VERSION}")


def run_directory(root: str | os.PathLike, cfg_hash: str) -> Path:
    """`<root>/<hash8>/` with the standard subdirectories created."""
    run_dir = Path(root) / cfg_hash[:8]
    for sub in RUN_SUBDIRS:
        (run_dir / sub).mkdir(parents=True, exist_ok=True)
    return run_dir


# ---------------------------------------------------------------------------
# Domain types


def _frozen_array(data: Any, ndim: int, what: str) -> np.ndarray:
    arr = np.array(data, dtype=np.float32, copy=True)
    if arr.ndim != ndim:
        raise ValueError(f"{what} must be {ndim}-D, got shape {arr.shape}")
    if 0 in arr.shape:
        raise ValueError(f"{what} must be non-empty, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{what} has non-finite entries")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class TextEmbedding:
    """Token-sequence conditioning matrix `[n_tokens, d_text]`."""

    data: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "data", _frozen_array(self.data, 2, type(self).__name__))

    @property
    def n_tokens(self) -> int:
        return self.data.shape[0]

    @property
    def d_text(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def digest(self) -> str:
        return tensor_hash(self.data)


class FusedEmbedding(TextEmbedding):
    pass


class DoubleFusedEmbedding(TextEmbedding):
    pass


@dataclass(frozen=True, eq=False)
class OptimizedEmbedding(TextEmbedding):
    pair_id: str = ""
    frozen: bool = True


@dataclass(frozen=True, eq=False)
class GestureFeature:
    data: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "data", _frozen_array(self.data, 1, "GestureFeature"))

    @property
    def d_gesture(self) -> int:
        return self.data.shape[0]


@dataclass(frozen=True, eq=False)
class MeanGestureFeature:
    gesture_id: str
    data: np.ndarray
    n_source_images: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "data", _frozen_array(self.data, 1, "MeanGestureFeature"))
        if self.n_source_images < 1:
            raise ValueError("n_source_images must be >= 1")

    @property
    def d_gesture(self) -> int:
        return self.data.shape[0]


@dataclass(frozen=True, eq=False)
class TrainingPair:
    pair_id: str
    image: np.ndarray  # [C, H, W] in [0, 1]
    caption: str
    gesture_id: str
    optimized_embedding_path: str | None = None

    def __post_init__(self) -> None:
        img = np.array(self.image, dtype=np.float32, copy=True)
        if img.ndim == 2:
            img = img[None]
        if img.ndim != 3:
            raise ValueError(f"image must be [C, H, W], got {img.shape}")
        if img.min() < 0.0 or img.max() > 1.0:
            raise ValueError(f"pair {self.pair_id}: image values outside [0, 1]")
        img.setflags(write=False)
        object.__setattr__(self, "image", img)


@dataclass
class MetricReport:
    metrics: dict[str, dict[str, float]] = field(default_factory=dict)
    config_hash: str = ""

    BOUNDS = {
        "FID": (0.0, float("inf")),
        "FID-H": (0.0, float("inf")),
        "HAND-CONF": (0.0, 1.0),
        "image_caption_consistency": (-1.0, 1.0),
        "caption_caption_similarity": (-1.0, 1.0),
    }

    def add(self, name: str, value: float, n_real: int = 0, n_generated: int = 0, **extra: Any) -> None:
        lo, hi = self.BOUNDS.get(name, (-float("inf"), float("inf")))
        if not lo <= value <= hi:
            raise ValueError(f"{name}={value} outside [{lo}, {hi}]")
        entry = {"value": float(value), "n_real": int(n_real), "n_generated": int(n_generated)}
        entry.update(extra)
        self.metrics[name] = entry

    def value(self, name: str) -> float:
        return self.metrics[name]["value"]

    def to_dict(self) -> dict[str, Any]:
        return {"config_hash": self.config_hash, "format_version": FORMAT_VERSION, "metrics": self.metrics}

    @classmethod
    def from_dict(cls, obj: Mapping[str, Any]) -> "MetricReport":
        check_version(obj, "MetricReport")
        return cls(metrics={k: dict(v) for k, v in obj["metrics"].items()}, config_hash=obj["config_hash"])

    def save(self, path: str | os.PathLike) -> Path:
        # json round-trips python floats exactly (repr is shortest round-trip)
        return write_json(path, self.to_dict())

    @classmethod
    def load(cls, path: str | os.PathLike) -> "MetricReport":
        return cls.from_dict(read_json(path))

    def table(self, columns: tuple[str, ...] = ("FID", "KID", "FID-H", "KID-H", "HAND-CONF"), label: str = "run") -> str:
        cols = [c for c in columns if c in self.metrics]
        head = "| Method | " + " | ".join(cols) + " |"
        sep = "|---" * (len(cols) + 1) + "|"
        row = f"| {label} | " + " | ".join(f"{self.value(c):.3f}" for c in cols) + " |"
        return "\n".join([head, sep, row])
