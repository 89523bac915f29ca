"""Gesture/text embedding fusion and the persisted gesture bundle.

The fused embedding appends the mean gesture feature to every token row of
the text embedding and maps the result back to the text width through a
frozen, bias-free linear layer. The double-fused embedding is the convex
blend `coeff * e_t + (1 - coeff) * e_f`.
"""

from __future__ import annotations

import hashlib
import os
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, runtime_checkable

import numpy as np

from . import adapters
from .artifacts import (
    FORMAT_VERSION,
    DoubleFusedEmbedding,
    FusedEmbedding,
    GestureFeature,
    MeanGestureFeature,
    TextEmbedding,
    check_version,
    load_tensor,
    read_json,
    save_tensor,
    tensor_hash,
    write_json,
)


class DimensionMismatchError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ProjectionWeights:
    weights: np.ndarray  # [d_text + d_gesture, d_text]
    seed: int

    frozen = True

    def __post_init__(self) -> None:
        w = np.array(self.weights, dtype=np.float32, copy=True)
        if w.ndim != 2 or w.shape[0] <= w.shape[1]:
            raise ValueError(f"projection must be [(d_text + d_gesture), d_text], got {w.shape}")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @classmethod
    def from_seed(cls, d_text: int, d_gesture: int, seed: int) -> "ProjectionWeights":
        fan_in = d_text + d_gesture
        bound = 1.0 / np.sqrt(fan_in)
        rng = np.random.Generator(np.random.PCG64(seed))
        w = rng.uniform(-bound, bound, size=(fan_in, d_text)).astype(np.float32)
        return cls(w, seed)

    @property
    def d_text(self) -> int:
        return self.weights.shape[1]

    @property
    def d_gesture(self) -> int:
        return self.weights.shape[0] - self.weights.shape[1]

    def digest(self) -> str:
        return tensor_hash(self.weights)


@dataclass(frozen=True)
class FusionConfig:
    lambda_train: float = 0.7
    mu_infer: float | None = None  # defaults to lambda_train

    def __post_init__(self) -> None:
        if self.mu_infer is None:
            object.__setattr__(self, "mu_infer", self.lambda_train)
        for name in ("lambda_train", "mu_infer"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")


def concat_project(
    e_t: TextEmbedding,
    g: GestureFeature | MeanGestureFeature,
    W: ProjectionWeights,
) -> FusedEmbedding:
    n_tokens, d_text = e_t.shape
    d_gesture = g.data.shape[0]
    if W.weights.shape != (d_text + d_gesture, d_text):
        raise DimensionMismatchError(
            f"projection is {W.weights.shape[0]}x{W.weights.shape[1]}, expected "
            f"{d_text + d_gesture}x{d_text} for d_text={d_text}, d_gesture={d_gesture}"
        )
    stacked = np.concatenate(
        [e_t.data.astype(np.float64), np.broadcast_to(g.data.astype(np.float64), (n_tokens, d_gesture))],
        axis=1,
    )
    return FusedEmbedding((stacked @ W.weights.astype(np.float64)).astype(np.float32))


def linear_fuse(e_t: TextEmbedding, e_f: TextEmbedding, coeff: float) -> DoubleFusedEmbedding:
    if e_t.shape != e_f.shape:
        raise DimensionMismatchError(f"cannot fuse shapes {e_t.shape} and {e_f.shape}")
    if not 0.0 <= coeff <= 1.0:
        raise ValueError(f"fusion coefficient {coeff} outside [0, 1]")
    # endpoints are exact copies, never 1*x + 0*y
    if coeff == 1.0:
        return DoubleFusedEmbedding(e_t.data)
    if coeff == 0.0:
        return DoubleFusedEmbedding(e_f.data)
    c = np.float64(coeff)
    blended = c * e_t.data.astype(np.float64) + (1.0 - c) * e_f.data.astype(np.float64)
    return DoubleFusedEmbedding(blended.astype(np.float32))


# ---------------------------------------------------------------------------
# Text encoders


@runtime_checkable
class TextEncoderAdapter(Protocol):
    name: str
    n_tokens: int
    d_text: int

    def encode(self, caption: str) -> TextEmbedding: ...


class HashTextEncoder:
    """Offline bag-of-words encoder with a fixed `[8, 32]` output.

    Each word gets a hash-seeded Gaussian vector and a hash-chosen token
    slot; a slot holds the sum of its words. Word order is ignored.
    """

    name = "hash"

    def __init__(self, n_tokens: int = 8, d_text: int = 32):
        self.n_tokens = n_tokens
        self.d_text = d_text
        self._cache: dict[str, tuple[int, np.ndarray]] = {}

    def _word(self, word: str) -> tuple[int, np.ndarray]:
        hit = self._cache.get(word)
        if hit is None:
            digest = hashlib.sha256(word.encode("utf-8")).digest()
            rng = np.random.Generator(np.random.PCG64(int.from_bytes(digest[:8], "little")))
            vec = rng.standard_normal(self.d_text) / np.sqrt(self.d_text)
            hit = (int.from_bytes(digest[8:12], "little") % self.n_tokens, vec)
            self._cache[word] = hit
        return hit

    def encode(self, caption: str) -> TextEmbedding:
        out = np.zeros((self.n_tokens, self.d_text))
        for word in re.findall(r"[a-z0-9']+", caption.lower()):
            slot, vec = self._word(word)
            out[slot] += vec
        return TextEmbedding(out.astype(np.float32))


class RemoteTextEncoder:
    """`POST /encode {text}` -> `{embedding: [[f32...]]}`."""

    def __init__(self, url: str | None = None, n_tokens: int = 77, d_text: int = 768, name: str = "text_encoder", timeout: float = 30.0):
        self.name = name
        self.url = url or adapters.adapter_url(name)
        if not self.url:
            raise adapters.AdapterError(f"no URL configured for remote adapter {name!r}")
        self.n_tokens, self.d_text, self.timeout = n_tokens, d_text, timeout

    def encode(self, caption: str) -> TextEmbedding:
        url = self.url.rstrip("/") + "/encode"
        emb = adapters.reply_field(adapters.post_json(url, {"text": caption}, self.timeout), "embedding", url)
        try:
            out = TextEmbedding(emb)
        except (TypeError, ValueError) as exc:
            raise adapters.AdapterError(f"{url}: malformed embedding: {exc}") from exc
        if out.shape != (self.n_tokens, self.d_text):
            raise adapters.AdapterError(f"{url}: embedding shape {out.shape} != {(self.n_tokens, self.d_text)}")
        return out


# ---------------------------------------------------------------------------
# Gesture bundle


@dataclass(frozen=True, eq=False)
class GestureBundle:
    gesture_id: str
    mean_feature: MeanGestureFeature
    projection: ProjectionWeights
    lambda_train: float = 0.7
    mu_infer: float = 0.7
    seed: int = 0
    format_version: int = FORMAT_VERSION

    def __post_init__(self) -> None:
        FusionConfig(self.lambda_train, self.mu_infer)
        if self.projection.d_gesture != self.mean_feature.d_gesture:
            raise DimensionMismatchError(
                f"projection expects d_gesture={self.projection.d_gesture}, "
                f"mean feature has {self.mean_feature.d_gesture}"
            )

    @classmethod
    def create(cls, mean_feature: MeanGestureFeature, d_text: int, fusion: FusionConfig, seed: int) -> "GestureBundle":
        proj = ProjectionWeights.from_seed(d_text, mean_feature.d_gesture, seed)
        return cls(mean_feature.gesture_id, mean_feature, proj, fusion.lambda_train, fusion.mu_infer, seed)

    def save(self, directory: str | os.PathLike) -> Path:
        directory = Path(directory)
        save_tensor(directory / "mean_feature.tsr", self.mean_feature.data)
        save_tensor(directory / "projection.tsr", self.projection.weights)
        write_json(directory / "bundle.json", {
            "format_version": self.format_version,
            "gesture_id": self.gesture_id,
            "n_source_images": self.mean_feature.n_source_images,
            "lambda_train": self.lambda_train,
            "mu_infer": self.mu_infer,
            "seed": self.seed,
            "d_text": self.projection.d_text,
            "d_gesture": self.projection.d_gesture,
            "projection_hash": self.projection.digest(),
        })
        return directory

    @classmethod
    def load(cls, directory: str | os.PathLike) -> "GestureBundle":
        directory = Path(directory)
        meta = read_json(directory / "bundle.json")
        check_version(meta, "GestureBundle")
        mean = MeanGestureFeature(meta["gesture_id"], load_tensor(directory / "mean_feature.tsr"), meta["n_source_images"])
        proj = ProjectionWeights(load_tensor(directory / "projection.tsr"), meta["seed"])
        if proj.digest() != meta["projection_hash"]:
            raise ValueError(f"{directory}: projection weights do not match recorded hash")
        return cls(meta["gesture_id"], mean, proj, meta["lambda_train"], meta["mu_infer"], meta["seed"], meta["format_version"])


def build_double_fused(
    caption: str,
    bundle: GestureBundle,
    encoder: TextEncoderAdapter,
    coeff: float,
) -> DoubleFusedEmbedding:
    e_t = encoder.encode(caption)
    if e_t.d_text != bundle.projection.d_text:
        raise DimensionMismatchError(f"encoder d_text={e_t.d_text} but bundle projection expects {bundle.projection.d_text}")
    e_f = concat_project(e_t, bundle.mean_feature, bundle.projection)
    return linear_fuse(e_t, e_f, coeff)
