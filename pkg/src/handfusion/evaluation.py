"""FID / KID, their hand-crop variants, and detector-confidence scoring."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Protocol, Sequence, runtime_checkable

import numpy as np
import torch
import torch.nn.functional as F

from . import adapters
from .artifacts import MetricReport
from .gestures import GestureRecognizerAdapter, best_detection

log = logging.getLogger(__name__)

CROP_MARGIN = 0.10
FID_JITTER = 1e-6


class InsufficientSamplesError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Feature extractors


@runtime_checkable
class FeatureExtractorAdapter(Protocol):
    name: str
    d_feat: int

    def extract(self, image: np.ndarray) -> np.ndarray: ...


class IdentityExtractor:
    """Flattened pixels."""

    name = "identity"

    def __init__(self, shape: tuple[int, ...]):
        self.shape = tuple(shape)
        self.d_feat = int(np.prod(shape))

    def extract(self, image: np.ndarray) -> np.ndarray:
        img = np.asarray(image, dtype=np.float64)
        if img.shape != self.shape:
            raise ValueError(f"expected image shape {self.shape}, got {img.shape}")
        return img.reshape(-1)


class DownsampleExtractor:
    """Area-average pooling to a `grid x grid` map per channel."""

    name = "downsample"

    def __init__(self, grid: int = 4, channels: int = 1):
        self.grid, self.channels = grid, channels
        self.d_feat = grid * grid * channels

    def extract(self, image: np.ndarray) -> np.ndarray:
        t = torch.as_tensor(np.asarray(image, dtype=np.float32))
        if t.ndim == 2:
            t = t[None]
        return F.adaptive_avg_pool2d(t[None], self.grid).reshape(-1).double().numpy()

    def extract_batch(self, images: np.ndarray) -> np.ndarray:
        t = torch.as_tensor(np.asarray(images, dtype=np.float32))
        return F.adaptive_avg_pool2d(t, self.grid).reshape(len(t), -1).double().numpy()


class RemoteExtractor:
    """`POST /extract` (PNG) -> `{vector}`."""

    def __init__(self, d_feat: int, url: str | None = None, name: str = "extractor", timeout: float = 60.0):
        self.name, self.d_feat, self.timeout = name, d_feat, timeout
        self.url = url or adapters.adapter_url(name)
        if not self.url:
            raise adapters.AdapterError(f"no URL configured for remote adapter {name!r}")

    def extract(self, image: np.ndarray) -> np.ndarray:
        url = self.url.rstrip("/") + "/extract"
        vec = np.asarray(adapters.reply_field(adapters.post_png(url, image, self.timeout), "vector", url), dtype=np.float64)
        if vec.shape != (self.d_feat,) or not np.all(np.isfinite(vec)):
            raise adapters.AdapterError(f"{url}: bad feature vector of shape {vec.shape}")
        return vec


def extract_all(images: Sequence[np.ndarray], extractor: FeatureExtractorAdapter) -> np.ndarray:
    if not len(images):
        return np.zeros((0, extractor.d_feat))
    if hasattr(extractor, "extract_batch"):
        return extractor.extract_batch(np.stack(images))
    return np.stack([extractor.extract(im) for im in images])


# ---------------------------------------------------------------------------
# FID


@dataclass(frozen=True, eq=False)
class FeatureStats:
    mean: np.ndarray
    cov: np.ndarray
    n: int

    def __post_init__(self) -> None:
        if self.n < 2:
            raise InsufficientSamplesError(f"need n >= 2 samples for a covariance, got {self.n}")
        if self.cov.shape != (self.mean.shape[0],) * 2:
            raise ValueError("covariance shape does not match mean")
        if not np.allclose(self.cov, self.cov.T, atol=1e-8, rtol=0):
            raise ValueError("covariance is not symmetric")

    @classmethod
    def from_features(cls, features: np.ndarray) -> "FeatureStats":
        f = np.asarray(features, dtype=np.float64)
        if f.ndim != 2 or f.shape[0] < 2:
            raise InsufficientSamplesError(f"need a [n>=2, d] feature matrix, got {f.shape}")
        cov = np.cov(f, rowvar=False).reshape(f.shape[1], f.shape[1])
        return cls(f.mean(axis=0), (cov + cov.T) / 2.0, f.shape[0])

    @property
    def d_feat(self) -> int:
        return self.mean.shape[0]


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((m + m.T) / 2.0)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def trace_sqrt_product(cov1: np.ndarray, cov2: np.ndarray) -> float:
    """`Tr((cov1 cov2)^(1/2))` via the symmetric product `S cov2 S`, `S = cov1^(1/2)`.

    Both matrices are PSD, so `cov1 cov2` is similar to `S cov2 S` and has
    the same (non-negative) eigenvalues. If sampling noise pushes the
    symmetric product noticeably negative, both covariances get
    `FID_JITTER * I` and the product is recomputed.
    """
    for jitter in (0.0, FID_JITTER):
        eye = np.eye(cov1.shape[0]) * jitter
        s = _psd_sqrt(cov1 + eye)
        prod = s @ (cov2 + eye) @ s
        try:
            vals = np.linalg.eigvalsh((prod + prod.T) / 2.0)
        except np.linalg.LinAlgError as exc:
            raise np.linalg.LinAlgError(f"eigendecomposition failed in FID: {exc}") from exc
        scale = max(1.0, float(np.abs(vals).max(initial=0.0)))
        if vals.min(initial=0.0) >= -1e-10 * scale or jitter:
            return float(np.sqrt(np.clip(vals, 0.0, None)).sum())
    raise AssertionError("unreachable")


def fid(stats_real: FeatureStats, stats_gen: FeatureStats) -> float:
    if stats_real.d_feat != stats_gen.d_feat:
        raise ValueError(f"feature dims differ: {stats_real.d_feat} vs {stats_gen.d_feat}")
    diff = stats_real.mean - stats_gen.mean
    tr = np.trace(stats_real.cov) + np.trace(stats_gen.cov) - 2.0 * trace_sqrt_product(stats_real.cov, stats_gen.cov)
    return max(0.0, float(diff @ diff + tr))


def frechet_distance_gaussians(mu1, cov1, mu2, cov2) -> float:
    """Closed-form Frechet distance between two Gaussians (scipy sqrtm route)."""
    from scipy import linalg

    diff = np.asarray(mu1) - np.asarray(mu2)
    covmean = linalg.sqrtm(np.asarray(cov1) @ np.asarray(cov2))
    return float(diff @ diff + np.trace(cov1) + np.trace(cov2) - 2.0 * np.trace(np.real(covmean)))


# ---------------------------------------------------------------------------
# KID


def polynomial_kernel(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    d = x.shape[1]
    return (x @ y.T / d + 1.0) ** 3


def mmd2_unbiased(x: np.ndarray, y: np.ndarray) -> float:
    m, n = len(x), len(y)
    kxx, kyy, kxy = polynomial_kernel(x, x), polynomial_kernel(y, y), polynomial_kernel(x, y)
    return float(
        (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
        + (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
        - 2.0 * kxy.mean()
    )


def _canonical_order(f: np.ndarray) -> np.ndarray:
    return f[np.lexsort(f.T[::-1])]


def kid_subset_estimates(
    features_real: np.ndarray,
    features_gen: np.ndarray,
    subset_size: int = 100,
    n_subsets: int = 100,
    seed: int = 0,
) -> np.ndarray:
    """Unbiased squared-MMD on `n_subsets` seeded subsets of each set.

    Rows are sorted before drawing so the result does not depend on the
    order in which features were supplied. Identical sets share one index
    draw per subset, so `kid(x, x)` reduces to the diagonal-exclusion term
    and is never positive; distinct sets draw independently.
    """
    x = _canonical_order(np.asarray(features_real, dtype=np.float64))
    y = _canonical_order(np.asarray(features_gen, dtype=np.float64))
    if x.shape[1] != y.shape[1]:
        raise ValueError(f"feature dims differ: {x.shape[1]} vs {y.shape[1]}")
    if subset_size < 2 or len(x) < subset_size or len(y) < subset_size:
        raise InsufficientSamplesError(
            f"KID needs >= subset_size={subset_size} (>= 2) samples per set, got {len(x)} and {len(y)}"
        )
    same = x.shape == y.shape and np.array_equal(x, y)
    rng = np.random.default_rng(seed)
    out = np.empty(n_subsets)
    for k in range(n_subsets):
        ix = rng.choice(len(x), subset_size, replace=False)
        iy = ix if same else rng.choice(len(y), subset_size, replace=False)
        xs, ys = x[ix], y[iy]
        out[k] = mmd2_unbiased(xs, ys)
    return out


def kid(features_real, features_gen, subset_size: int = 100, n_subsets: int = 100, seed: int = 0) -> float:
    return float(kid_subset_estimates(features_real, features_gen, subset_size, n_subsets, seed).mean())


# ---------------------------------------------------------------------------
# Hand crops and confidence


def expand_box(bbox: Sequence[float], margin: float = CROP_MARGIN) -> tuple[float, float, float, float]:
    x0, y0, x1, y1 = bbox
    dx, dy = (x1 - x0) * margin, (y1 - y0) * margin
    return (max(0.0, x0 - dx), max(0.0, y0 - dy), min(1.0, x1 + dx), min(1.0, y1 + dy))


def crop_box(image: np.ndarray, box: Sequence[float], patch_size: int) -> np.ndarray:
    """Bilinearly resample the normalized box `[x0, y0, x1, y1]` to `patch_size^2`."""
    img = torch.as_tensor(np.asarray(image, dtype=np.float32))
    if img.ndim == 2:
        img = img[None]
    x0, y0, x1, y1 = box
    centers = (torch.arange(patch_size, dtype=torch.float64) + 0.5) / patch_size
    gx = (x0 + centers * (x1 - x0)) * 2.0 - 1.0
    gy = (y0 + centers * (y1 - y0)) * 2.0 - 1.0
    grid = torch.stack(torch.meshgrid(gy, gx, indexing="ij")[::-1], dim=-1).float()[None]
    patch = F.grid_sample(img[None], grid, mode="bilinear", padding_mode="border", align_corners=False)
    return patch[0].numpy()


@dataclass
class CropResult:
    patches: list[np.ndarray]
    kept: list[int]
    excluded: int


def crop_hand_regions(
    images: Sequence[np.ndarray],
    detector: GestureRecognizerAdapter,
    patch_size: int = 16,
    margin: float = CROP_MARGIN,
) -> CropResult:
    patches, kept, excluded = [], [], 0
    for i, img in enumerate(images):
        det = best_detection(img, detector)
        if det is None:
            excluded += 1
            continue
        patches.append(crop_box(img, expand_box(det.bbox, margin), patch_size))
        kept.append(i)
    return CropResult(patches, kept, excluded)


def hand_conf(images: Sequence[np.ndarray], detector: GestureRecognizerAdapter) -> float:
    """Mean over images of the top detection confidence (0 when nothing is detected)."""
    if not len(images):
        raise ValueError("need at least one image")
    scores = []
    for img in images:
        det = best_detection(img, detector)
        scores.append(0.0 if det is None else det.confidence)
    return float(np.mean(scores))


@dataclass
class HandMetric:
    value: float
    n_real: int
    n_generated: int
    excluded_real: int
    excluded_generated: int


def _hand_features(real, gen, detector, extractor, patch_size):
    cr = crop_hand_regions(real, detector, patch_size)
    cg = crop_hand_regions(gen, detector, patch_size)
    if len(cr.patches) < 2 or len(cg.patches) < 2:
        raise InsufficientSamplesError(
            f"too few hand crops survived: {len(cr.patches)} real, {len(cg.patches)} generated"
        )
    return extract_all(cr.patches, extractor), extract_all(cg.patches, extractor), cr, cg


def fid_h(real_images, gen_images, detector, extractor, patch_size: int = 16) -> HandMetric:
    fr, fg, cr, cg = _hand_features(real_images, gen_images, detector, extractor, patch_size)
    value = fid(FeatureStats.from_features(fr), FeatureStats.from_features(fg))
    return HandMetric(value, len(fr), len(fg), cr.excluded, cg.excluded)


def kid_h(real_images, gen_images, detector, extractor, patch_size: int = 16,
          subset_size: int = 100, n_subsets: int = 100, seed: int = 0) -> HandMetric:
    fr, fg, cr, cg = _hand_features(real_images, gen_images, detector, extractor, patch_size)
    value = kid(fr, fg, subset_size, n_subsets, seed)
    return HandMetric(value, len(fr), len(fg), cr.excluded, cg.excluded)


# ---------------------------------------------------------------------------
# Full suite


def evaluate_sets(
    real_images: Sequence[np.ndarray],
    gen_images: Sequence[np.ndarray],
    detector: GestureRecognizerAdapter,
    extractor: FeatureExtractorAdapter,
    patch_size: int = 16,
    kid_subset_size: int = 100,
    kid_subsets: int = 100,
    seed: int = 0,
    config_hash: str = "",
) -> MetricReport:
    """All five metrics. KID subsets shrink to the smaller set size when needed."""
    report = MetricReport(config_hash=config_hash)
    fr, fg = extract_all(real_images, extractor), extract_all(gen_images, extractor)
    nr, ng = len(fr), len(fg)
    report.add("FID", fid(FeatureStats.from_features(fr), FeatureStats.from_features(fg)), nr, ng)
    m = min(kid_subset_size, nr, ng)
    if m < kid_subset_size:
        log.warning("KID: shrinking subset size %d -> %d", kid_subset_size, m)
    report.add("KID", kid(fr, fg, m, kid_subsets, seed), nr, ng, subset_size=m)

    hr, hg, cr, cg = _hand_features(real_images, gen_images, detector, extractor, patch_size)
    extra = {"excluded_real": cr.excluded, "excluded_generated": cg.excluded}
    report.add("FID-H", fid(FeatureStats.from_features(hr), FeatureStats.from_features(hg)), len(hr), len(hg), **extra)
    mh = min(kid_subset_size, len(hr), len(hg))
    report.add("KID-H", kid(hr, hg, mh, kid_subsets, seed), len(hr), len(hg), subset_size=mh, **extra)
    report.add("HAND-CONF", hand_conf(gen_images, detector), 0, ng)
    return report
