"""Dataset construction: caption, enrich with the gesture label, split, score.

Manifests are JSON-lines files (one `DatasetRecord` per line, sorted by
pair_id) next to images stored as `<gesture>/<pair_id>.png`.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Iterable, Protocol, Sequence, runtime_checkable

import numpy as np

from . import adapters
from .artifacts import TrainingPair
from .gestures import GlyphOracleRecognizer, best_detection
from .glyphs import BACKGROUND_MAX, GESTURES, TEXTURES, glyph_mask, position_phrase, render_glyph, slug

log = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.jsonl"


class InsufficientImagesError(ValueError):
    pass


class FailureBudgetExceeded(RuntimeError):
    pass


@dataclass(frozen=True)
class DatasetRecord:
    pair_id: str
    image_path: str  # relative to the dataset root
    raw_caption: str
    enriched_caption: str
    gesture_id: str
    split: str

    def __post_init__(self) -> None:
        if self.split not in ("train", "test"):
            raise ValueError(f"split must be 'train' or 'test', got {self.split!r}")


# ---------------------------------------------------------------------------
# Adapters


@runtime_checkable
class CaptionerAdapter(Protocol):
    name: str

    def caption(self, image: np.ndarray) -> str: ...


@runtime_checkable
class EnricherAdapter(Protocol):
    name: str

    def enrich(self, caption: str, gesture_label: str) -> str: ...


@runtime_checkable
class JointEmbedderAdapter(Protocol):
    name: str

    def embed_text(self, text: str) -> np.ndarray: ...

    def embed_image(self, image: np.ndarray) -> np.ndarray: ...


def classify_texture(image: np.ndarray, glyph: np.ndarray | None = None) -> str:
    """Guess which background texture generator produced a glyph image."""
    img = np.asarray(image, dtype=np.float64)
    img = img.mean(axis=0) if img.ndim == 3 else img
    bg = img <= BACKGROUND_MAX + 1e-6 if glyph is None else ~glyph
    if bg.sum() < 4 or np.ptp(img[bg]) < 0.02:
        return "plain"
    masked = np.where(bg, img, np.nan)
    row_var = np.nanmean(np.nanvar(masked, axis=1))
    col_var = np.nanmean(np.nanvar(masked, axis=0))
    total = np.nanvar(masked)
    if row_var < 0.15 * total:
        return "striped"
    dx = np.abs(np.diff(masked, axis=1))
    if np.nanmedian(dx) < 0.01 and col_var > 0.15 * total:
        return "checkered"
    return "noisy"


class GlyphSceneCaptioner:
    """Describes glyph size, coarse position and background texture."""

    name = "glyph-scene"

    def __init__(self) -> None:
        self._detector = GlyphOracleRecognizer()

    def caption(self, image: np.ndarray) -> str:
        img = np.asarray(image, dtype=np.float32)
        size = img.shape[-1]
        det = best_detection(img, self._detector)
        texture = classify_texture(img)
        if det is None:
            return f"an empty {texture} background"
        x0, y0, x1, y1 = det.bbox
        big = (x1 - x0) * size > glyph_mask(GESTURES[0]).shape[1] + 1
        where = position_phrase((y0 + y1) / 2 * size, (x0 + x1) / 2 * size, size)
        return f"a {'large' if big else 'small'} glyph at the {where} on a {texture} background"


class TemplateEnricher:
    """`"<caption>, making a <label> hand gesture"`."""

    name = "template"

    def enrich(self, caption: str, gesture_label: str) -> str:
        return f"{caption.rstrip(' .')}, making a {gesture_label} hand gesture"


class RemoteCaptioner:
    def __init__(self, url: str | None = None, name: str = "captioner", timeout: float = 60.0):
        self.name = name
        self.url = url or adapters.adapter_url(name)
        if not self.url:
            raise adapters.AdapterError(f"no URL configured for remote adapter {name!r}")
        self.timeout = timeout

    def caption(self, image: np.ndarray) -> str:
        url = self.url.rstrip("/") + "/caption"
        text = adapters.reply_field(adapters.post_png(url, image, self.timeout), "caption", url)
        if not isinstance(text, str) or not text.strip():
            raise adapters.AdapterError(f"{url}: empty caption")
        return text


class RemoteEnricher:
    def __init__(self, url: str | None = None, name: str = "enricher", timeout: float = 60.0):
        self.name = name
        self.url = url or adapters.adapter_url(name)
        if not self.url:
            raise adapters.AdapterError(f"no URL configured for remote adapter {name!r}")
        self.timeout = timeout

    def enrich(self, caption: str, gesture_label: str) -> str:
        url = self.url.rstrip("/") + "/enrich"
        text = adapters.reply_field(
            adapters.post_json(url, {"caption": caption, "label": gesture_label}, self.timeout), "enriched", url
        )
        if not isinstance(text, str):
            raise adapters.AdapterError(f"{url}: enriched caption is not a string")
        return text


def _unit(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    if not np.isfinite(n) or n == 0:
        raise ValueError("cannot normalize a zero or non-finite vector")
    return v / n


class RemoteJointEmbedder:
    """`POST /embed_text {text}` and `POST /embed_image` (PNG) -> `{vector}`."""

    def __init__(self, url: str | None = None, name: str = "embedder", timeout: float = 60.0):
        self.name = name
        self.url = url or adapters.adapter_url(name)
        if not self.url:
            raise adapters.AdapterError(f"no URL configured for remote adapter {name!r}")
        self.timeout = timeout

    def embed_text(self, text: str) -> np.ndarray:
        url = self.url.rstrip("/") + "/embed_text"
        return _unit(adapters.reply_field(adapters.post_json(url, {"text": text}, self.timeout), "vector", url))

    def embed_image(self, image: np.ndarray) -> np.ndarray:
        url = self.url.rstrip("/") + "/embed_image"
        return _unit(adapters.reply_field(adapters.post_png(url, image, self.timeout), "vector", url))


class ConstantJointEmbedder:
    """Test fixture: text and images map to fixed unit vectors.

    With `text_axis == image_axis` every caption matches its image exactly
    (cosine 1); with different axes they are orthogonal (cosine 0).
    """

    name = "constant"

    def __init__(self, dim: int = 8, text_axis: int = 0, image_axis: int = 0):
        self.dim, self.text_axis, self.image_axis = dim, text_axis, image_axis

    def embed_text(self, text: str) -> np.ndarray:
        return np.eye(self.dim)[self.text_axis]

    def embed_image(self, image: np.ndarray) -> np.ndarray:
        return np.eye(self.dim)[self.image_axis]


class GlyphConceptEmbedder:
    """Offline joint embedder over a shared concept vocabulary.

    Concepts are gesture names, textures, sizes and position words. Text
    activates the concepts it mentions; an image activates the concepts the
    glyph detector and texture classifier find. Words outside the
    vocabulary land in hashed nuisance dimensions on the text side only.
    """

    name = "glyph-concept"
    n_hash = 32

    def __init__(self) -> None:
        self.concepts = list(GESTURES) + list(TEXTURES) + ["small", "large", "top", "middle", "bottom", "left", "center", "right"]
        self.index = {c: i for i, c in enumerate(self.concepts)}
        self.dim = len(self.concepts) + self.n_hash
        self._detector = GlyphOracleRecognizer()
        self._templates = {g: self._template_feature(g) for g in GESTURES}
        self._words = {w for c in self.concepts for w in c.split()}

    def _template_feature(self, gesture: str) -> np.ndarray:
        scene = render_glyph(gesture, 16, np.random.default_rng(0), scale=2, top=3, left=3, texture="plain")
        return self._detector.detect(scene.image)[0].feature.data

    def embed_text(self, text: str) -> np.ndarray:
        v = np.zeros(self.dim)
        low = " " + " ".join(re.findall(r"[a-z]+", text.lower())) + " "
        for c in self.concepts:
            if f" {c} " in low:
                v[self.index[c]] += 1.0
        for w in low.split():
            if w not in self._words:
                h = int.from_bytes(hashlib.sha256(w.encode()).digest()[:4], "little")
                v[len(self.concepts) + h % self.n_hash] += 0.25
        return _unit(v) if v.any() else np.eye(self.dim)[-1]

    def embed_image(self, image: np.ndarray) -> np.ndarray:
        img = np.asarray(image, dtype=np.float32)
        size = img.shape[-1]
        v = np.zeros(self.dim)
        v[self.index[classify_texture(img)]] = 1.0
        det = best_detection(img, self._detector)
        if det is not None:
            dists = {g: np.linalg.norm(det.feature.data - f) for g, f in self._templates.items()}
            v[self.index[min(dists, key=dists.get)]] = 1.0
            x0, y0, x1, y1 = det.bbox
            big = (x1 - x0) * size > glyph_mask(GESTURES[0]).shape[1] + 1
            v[self.index["large" if big else "small"]] = 1.0
            for word in position_phrase((y0 + y1) / 2 * size, (x0 + x1) / 2 * size, size).split():
                v[self.index[word]] = 1.0
        return _unit(v)


# ---------------------------------------------------------------------------
# Splits and manifests


def split_rank(pair_id: str, seed: int) -> str:
    return hashlib.sha256(f"{seed}:{pair_id}".encode("utf-8")).hexdigest()


def assign_splits(pair_ids: Sequence[str], n_train: int, n_test: int, seed: int) -> dict[str, str | None]:
    """Rank ids by a seeded hash; the first `n_train` train, the next `n_test` test, the rest unused."""
    ranked = sorted(pair_ids, key=lambda p: split_rank(p, seed))
    out: dict[str, str | None] = {}
    for i, pid in enumerate(ranked):
        out[pid] = "train" if i < n_train else "test" if i < n_train + n_test else None
    return out


def write_manifest(root: str | os.PathLike, records: Iterable[DatasetRecord], meta: dict) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    recs = sorted(records, key=lambda r: r.pair_id)
    with open(root / MANIFEST_NAME, "w", encoding="utf-8") as fh:
        for r in recs:
            fh.write(json.dumps(asdict(r), sort_keys=True, ensure_ascii=False) + "\n")
    (root / "dataset.json").write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return root / MANIFEST_NAME


def read_manifest(root: str | os.PathLike) -> list[DatasetRecord]:
    path = Path(root) / MANIFEST_NAME
    if not path.exists():
        raise FileNotFoundError(f"no {MANIFEST_NAME} in {root}")
    with open(path, encoding="utf-8") as fh:
        return [DatasetRecord(**json.loads(line)) for line in fh if line.strip()]


def dataset_fingerprint(root: str | os.PathLike) -> str:
    return hashlib.sha256((Path(root) / MANIFEST_NAME).read_bytes()).hexdigest()


def load_image(root: str | os.PathLike, record: DatasetRecord) -> np.ndarray:
    return adapters.load_png(Path(root) / record.image_path)


def load_pairs(
    root: str | os.PathLike,
    gesture_id: str,
    split: str = "train",
    limit: int | None = None,
) -> list[TrainingPair]:
    """Training pairs of one gesture, sorted by pair_id, optionally truncated."""
    recs = [r for r in read_manifest(root) if r.gesture_id == gesture_id and r.split == split]
    recs.sort(key=lambda r: r.pair_id)
    if limit is not None:
        recs = recs[:limit]
    return [TrainingPair(r.pair_id, load_image(root, r), r.enriched_caption, r.gesture_id) for r in recs]


# ---------------------------------------------------------------------------
# Builders


def _with_retry(fn: Callable[[], str], retries: int) -> str:
    last: Exception | None = None
    for _ in range(retries + 1):
        try:
            return fn()
        except adapters.AdapterError as exc:
            last = exc
    assert last is not None
    raise last


def build_dataset(
    image_dir: str | os.PathLike,
    gesture_labels: Sequence[str],
    captioner: CaptionerAdapter,
    enricher: EnricherAdapter,
    n_train: int,
    n_test: int,
    seed: int = 0,
    out_dir: str | os.PathLike | None = None,
    retries: int = 2,
    failure_budget: float = 0.01,
    workers: int = 8,
) -> list[DatasetRecord]:
    """Caption and enrich the images under `image_dir/<gesture>/*.png`.

    The split is decided before any adapter call so failures never shift it.
    Failed images are dropped and logged; more than `failure_budget` of
    them aborts with `FailureBudgetExceeded`.
    """
    image_dir = Path(image_dir)
    out_dir = Path(out_dir) if out_dir is not None else image_dir
    jobs = []
    for label in gesture_labels:
        files = sorted((image_dir / slug(label)).glob("*.png"))
        if len(files) < n_train + n_test:
            raise InsufficientImagesError(
                f"gesture {label!r}: {len(files)} images, need {n_train + n_test}"
            )
        ids = {f"{slug(label)}-{f.stem}": f for f in files}
        for pid, split in assign_splits(list(ids), n_train, n_test, seed).items():
            if split is not None:
                jobs.append((pid, ids[pid], label, split))
    jobs.sort()

    def work(job):
        pid, path, label, split = job
        try:
            image = adapters.load_png(path)
            raw = _with_retry(lambda: captioner.caption(image), retries)
            enriched = _with_retry(lambda: enricher.enrich(raw, label), retries)
        except adapters.AdapterError as exc:
            return pid, exc
        if label.lower() not in enriched.lower():
            return pid, adapters.AdapterError(f"enriched caption lacks {label!r}: {enriched!r}")
        rel = os.path.relpath(path, out_dir)
        return pid, DatasetRecord(pid, rel, raw, enriched, label, split)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        results = list(pool.map(work, jobs))
    records, failures = [], []
    for pid, res in results:
        if isinstance(res, DatasetRecord):
            records.append(res)
        else:
            failures.append((pid, str(res)))
            log.warning("dataset: dropping %s: %s", pid, res)
    if jobs and len(failures) / len(jobs) > failure_budget:
        raise FailureBudgetExceeded(f"{len(failures)}/{len(jobs)} images failed (budget {failure_budget:.0%})")
    write_manifest(out_dir, records, {
        "captioner": captioner.name,
        "enricher": enricher.name,
        "seed": seed,
        "n_train": n_train,
        "n_test": n_test,
        "gestures": list(gesture_labels),
        "failures": failures,
    })
    return sorted(records, key=lambda r: r.pair_id)


def make_toy_dataset(
    out_dir: str | os.PathLike,
    n_per_gesture: int,
    gestures: Sequence[str] = GESTURES[:3],
    image_size: int = 16,
    seed: int = 0,
    n_test: int | None = None,
    enricher: EnricherAdapter | None = None,
) -> list[DatasetRecord]:
    """Render seeded glyph scenes and caption them from the renderer's ground truth.

    `n_test` images per gesture (default: half) go to the test split.
    """
    out_dir = Path(out_dir)
    enricher = enricher or TemplateEnricher()
    for g in gestures:
        glyph_mask(g)
    n_test = n_per_gesture // 2 if n_test is None else n_test
    records = []
    for g_index, gesture in enumerate(gestures):
        rng = np.random.default_rng([seed, GESTURES.index(gesture) if gesture in GESTURES else g_index])
        ids = [f"{slug(gesture)}-{i:05d}" for i in range(n_per_gesture)]
        splits = assign_splits(ids, n_per_gesture - n_test, n_test, seed)
        for pid in ids:
            scene = render_glyph(gesture, image_size, rng)
            rel = f"{slug(gesture)}/{pid}.png"
            adapters.save_png(out_dir / rel, scene.image)
            raw = scene.caption()
            records.append(DatasetRecord(pid, rel, raw, enricher.enrich(raw, gesture), gesture, splits[pid]))
    write_manifest(out_dir, records, {
        "kind": "toy-glyphs",
        "captioner": "renderer-ground-truth",
        "enricher": enricher.name,
        "seed": seed,
        "n_per_gesture": n_per_gesture,
        "n_test": n_test,
        "image_size": image_size,
        "gestures": list(gestures),
    })
    return sorted(records, key=lambda r: r.pair_id)


def render_pretraining_corpus(n_images: int, image_size: int = 16, seed: int = 0) -> list[tuple[np.ndarray, str]]:
    """Glyphs of every class with gesture-free captions, for base-model pretraining."""
    rng = np.random.default_rng([seed, 7919])
    out = []
    for i in range(n_images):
        scene = render_glyph(GESTURES[i % len(GESTURES)], image_size, rng)
        out.append((adapters.quantize(scene.image), scene.caption()))
    return out


# ---------------------------------------------------------------------------
# Quality metrics


def image_caption_consistency(
    records: Sequence[DatasetRecord],
    embedder: JointEmbedderAdapter,
    root: str | os.PathLike | None = None,
    images: Sequence[np.ndarray] | None = None,
    field: str = "enriched_caption",
) -> float:
    """Mean cosine similarity between each caption and its own image."""
    if not records:
        raise ValueError("need at least one record")
    sims = []
    for i, r in enumerate(records):
        img = images[i] if images is not None else load_image(root, r)
        sims.append(float(np.dot(embedder.embed_text(getattr(r, field)), embedder.embed_image(img))))
    return float(np.clip(np.mean(sims), -1.0, 1.0))


def caption_caption_similarity(
    records: Sequence[DatasetRecord],
    embedder: JointEmbedderAdapter,
    max_pairs: int = 100_000,
    seed: int = 0,
    field: str = "enriched_caption",
) -> float:
    """Mean cosine similarity over unordered caption pairs (seeded subsample above `max_pairs`)."""
    if len(records) < 2:
        raise ValueError("need at least two records")
    ordered = sorted(records, key=lambda r: r.pair_id)
    vecs = np.stack([embedder.embed_text(getattr(r, field)) for r in ordered])
    n = len(vecs)
    total_pairs = n * (n - 1) // 2
    if total_pairs <= max_pairs:
        gram = vecs @ vecs.T
        iu = np.triu_indices(n, k=1)
        return float(np.clip(gram[iu].mean(), -1.0, 1.0))
    rng = np.random.default_rng(seed)
    flat = rng.choice(total_pairs, size=max_pairs, replace=False)
    rows = np.arange(n - 1)
    offsets = rows * n - rows * (rows + 1) // 2  # first flat index of each row
    i = np.searchsorted(offsets, flat, side="right") - 1
    j = flat - offsets[i] + i + 1
    sims = np.einsum("kd,kd->k", vecs[i], vecs[j])
    return float(np.clip(sims.mean(), -1.0, 1.0))


def qa_rows(
    records: Sequence[DatasetRecord],
    embedder: JointEmbedderAdapter,
    root: str | os.PathLike,
    label: str,
    max_pairs: int = 100_000,
    seed: int = 0,
) -> list[dict]:
    """Dataset quality rows: raw captions and, when they differ, post-processed ones."""
    images = [load_image(root, r) for r in records]
    rows = []
    fields = [("raw_caption", label), ("enriched_caption", f"{label}(post-processed)")]
    for fld, name in fields:
        if fld == "enriched_caption" and all(r.raw_caption == r.enriched_caption for r in records):
            continue
        row = {
            "method": name,
            "image_caption_consistency": image_caption_consistency(records, embedder, images=images, field=fld),
            "caption_caption_similarity": caption_caption_similarity(records, embedder, max_pairs, seed, field=fld),
            "n_records": len(records),
        }
        per_gesture = {}
        for g in sorted({r.gesture_id for r in records}):
            sub = [k for k, r in enumerate(records) if r.gesture_id == g]
            entry = {"image_caption_consistency": image_caption_consistency(
                [records[k] for k in sub], embedder, images=[images[k] for k in sub], field=fld)}
            if len(sub) >= 2:
                entry["caption_caption_similarity"] = caption_caption_similarity(
                    [records[k] for k in sub], embedder, max_pairs, seed, field=fld)
            per_gesture[g] = entry
        row["per_gesture"] = per_gesture
        rows.append(row)
    return rows


def qa_table(rows: Sequence[dict]) -> str:
    lines = [
        "| Dataset Processing Method | Image-Caption Consistency↑ | Caption-Caption Similarity↓ |",
        "|---|---|---|",
    ]
    for r in rows:
        lines.append(f"| {r['method']} | {r['image_caption_consistency']:.3f} | {r['caption_caption_similarity']:.3f} |")
    return "\n".join(lines)
