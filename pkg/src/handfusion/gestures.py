"""Stage I: per-image gesture features and their per-class mean."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Iterable, Protocol, Sequence, runtime_checkable

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from . import adapters
from .artifacts import GestureFeature, MeanGestureFeature
from .glyphs import GLYPH_THRESHOLD

log = logging.getLogger(__name__)

DEFAULT_CONFIDENCE_FLOOR = 0.5


class NoDetectionError(ValueError):
    """No image in a set produced a usable detection."""


@dataclass(frozen=True)
class Detection:
    feature: GestureFeature
    confidence: float
    bbox: tuple[float, float, float, float]  # normalized x0, y0, x1, y1

    def __post_init__(self) -> None:
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")
        x0, y0, x1, y1 = self.bbox
        if not (0.0 <= x0 < x1 <= 1.0 and 0.0 <= y0 < y1 <= 1.0):
            raise ValueError(f"malformed bbox {self.bbox}")


@runtime_checkable
class GestureRecognizerAdapter(Protocol):
    name: str
    d_gesture: int

    def detect(self, image: np.ndarray) -> list[Detection]: ...


class GlyphOracleRecognizer:
    """Threshold-and-label detector for synthetic glyph images.

    Every bright 8-connected component of at least `min_pixels` pixels is a
    detection. Its feature is the glyph mask resampled to a 4x4 occupancy
    grid over its bounding box (16 values in [0, 1]); its confidence is the
    fill ratio of the mask inside that box.
    """

    name = "glyph-oracle"
    grid = 4
    d_gesture = grid * grid

    def __init__(self, threshold: float = GLYPH_THRESHOLD, min_pixels: int = 4):
        self.threshold = threshold
        self.min_pixels = min_pixels

    def detect(self, image: np.ndarray) -> list[Detection]:
        img = np.asarray(image, dtype=np.float32)
        if img.ndim == 3:
            img = img.mean(axis=0)
        h, w = img.shape
        labels, n = ndimage.label(img > self.threshold, structure=np.ones((3, 3)))
        out = []
        for k, sl in enumerate(ndimage.find_objects(labels), start=1):
            comp = labels[sl] == k
            count = int(comp.sum())
            if count < self.min_pixels:
                continue
            grid = F.adaptive_avg_pool2d(torch.from_numpy(comp.astype(np.float32))[None, None], self.grid)
            feature = GestureFeature(grid.flatten().numpy())
            rs, cs = sl
            bbox = (cs.start / w, rs.start / h, cs.stop / w, rs.stop / h)
            out.append(Detection(feature, count / comp.size, bbox))
        out.sort(key=lambda d: -d.confidence)
        return out


class RemoteRecognizer:
    """`POST /detect` with a PNG body; reply `{detections: [{feature, confidence, bbox}]}`."""

    def __init__(self, url: str | None = None, d_gesture: int = 16, name: str = "recognizer", timeout: float = 30.0):
        self.name = name
        self.url = url or adapters.adapter_url(name)
        if not self.url:
            raise adapters.AdapterError(f"no URL configured for remote adapter {name!r}")
        self.d_gesture = d_gesture
        self.timeout = timeout

    def detect(self, image: np.ndarray) -> list[Detection]:
        url = self.url.rstrip("/") + "/detect"
        reply = adapters.post_png(url, image, self.timeout)
        try:
            dets = [
                Detection(GestureFeature(d["feature"]), float(d["confidence"]), tuple(float(v) for v in d["bbox"]))
                for d in adapters.reply_field(reply, "detections", url)
            ]
        except (KeyError, TypeError, ValueError) as exc:
            raise adapters.AdapterError(f"{url}: malformed detection: {exc}") from exc
        for d in dets:
            if d.feature.d_gesture != self.d_gesture:
                raise adapters.AdapterError(f"{url}: feature dim {d.feature.d_gesture} != {self.d_gesture}")
        return dets


def best_detection(image: np.ndarray, adapter: GestureRecognizerAdapter) -> Detection | None:
    dets = adapter.detect(image)
    return max(dets, key=lambda d: d.confidence) if dets else None


def extract_feature(
    image: np.ndarray,
    adapter: GestureRecognizerAdapter,
    confidence_floor: float = DEFAULT_CONFIDENCE_FLOOR,
) -> GestureFeature | None:
    """Feature of the most confident detection, or None below the floor.

    Adapter failures propagate as `AdapterError`; they are not "no hand".
    """
    best = best_detection(image, adapter)
    if best is None or best.confidence < confidence_floor:
        return None
    return best.feature


def mean_gesture_feature(
    images: Sequence[np.ndarray] | Iterable[np.ndarray],
    adapter: GestureRecognizerAdapter,
    gesture_id: str = "",
    confidence_floor: float = DEFAULT_CONFIDENCE_FLOOR,
    ids: Sequence[str] | None = None,
) -> MeanGestureFeature:
    images = list(images)
    ids = list(ids) if ids is not None else [str(i) for i in range(len(images))]
    order = sorted(range(len(images)), key=lambda i: ids[i])
    feats = []
    for i in order:
        feat = extract_feature(images[i], adapter, confidence_floor)
        if feat is None:
            log.info("stage I: skipping %s (no detection above %.2f)", ids[i], confidence_floor)
            continue
        feats.append(feat.data)
    if not feats:
        raise NoDetectionError(f"no detections among {len(images)} images for gesture {gesture_id!r}")
    # fsum is exactly rounded, hence independent of summation order
    stacked = np.stack(feats).astype(np.float64)
    mean = np.array([math.fsum(col) for col in stacked.T]) / len(feats)
    return MeanGestureFeature(gesture_id, mean.astype(np.float32), len(feats))
