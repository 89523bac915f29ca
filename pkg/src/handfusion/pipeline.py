"""Three-stage training run with on-disk caching, plus run evaluation.

Layout under `<run_dir>/<hash8>/`::

    bundle/        gesture bundle (stage I output + frozen projection)
    embeddings/    one TSR per training pair + index.json (stage II)
    checkpoints/   final/ and last_good/ backend checkpoints (stage III)
    samples/       generated PNGs and a contact sheet
    reports/       metrics.json
    manifest.json

Each stage writes a `stage.json` marker holding the hash of every input it
depends on, last. A rerun skips a stage whose marker matches.
"""

from __future__ import annotations

import contextlib
import logging
import os
import time
from dataclasses import asdict
from pathlib import Path
from typing import Any, Iterator

import numpy as np
import torch

from . import adapters
from .artifacts import (
    FORMAT_VERSION,
    MetricReport,
    OptimizedEmbedding,
    config_hash,
    load_tensor,
    read_json,
    run_directory,
    save_tensor,
    write_json,
)
from .config import RunConfig
from .dataset import dataset_fingerprint, load_pairs, read_manifest, load_image, render_pretraining_corpus
from .diffusion import ToyBackend, ToyBackendConfig, load_checkpoint, make_schedule, save_checkpoint
from .evaluation import DownsampleExtractor, IdentityExtractor, RemoteExtractor, evaluate_sets
from .fusion import FusionConfig, GestureBundle, HashTextEncoder, RemoteTextEncoder
from .gestures import GlyphOracleRecognizer, RemoteRecognizer, mean_gesture_feature
from .training import (
    StageIIConfig,
    StageIIIConfig,
    finetune_backend,
    generate_batch,
    optimize_embeddings,
)

log = logging.getLogger(__name__)


class RunLockedError(RuntimeError):
    pass


@contextlib.contextmanager
def run_lock(directory: str | os.PathLike) -> Iterator[Path]:
    """Single writer per run directory."""
    path = Path(directory) / ".lock"
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RunLockedError(f"{directory} is locked by another writer ({path})") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield path
    finally:
        path.unlink(missing_ok=True)


# ---------------------------------------------------------------------------
# Adapter factories


def make_encoder(cfg: RunConfig):
    if cfg.encoder.kind == "hash":
        return HashTextEncoder(cfg.encoder.n_tokens, cfg.encoder.d_text)
    return RemoteTextEncoder(n_tokens=cfg.encoder.n_tokens, d_text=cfg.encoder.d_text)


def make_recognizer(kind: str = "glyph-oracle"):
    return GlyphOracleRecognizer() if kind == "glyph-oracle" else RemoteRecognizer()


def make_extractor(cfg: RunConfig, image_shape: tuple[int, ...] | None = None):
    if cfg.eval.extractor == "downsample":
        return DownsampleExtractor(cfg.eval.grid)
    if cfg.eval.extractor == "identity":
        return IdentityExtractor(image_shape or (1, cfg.eval.patch_size, cfg.eval.patch_size))
    return RemoteExtractor(cfg.eval.grid * cfg.eval.grid)


def make_schedule_for(cfg: RunConfig):
    return make_schedule(cfg.backend.schedule.n_steps, cfg.backend.schedule.kind)


# ---------------------------------------------------------------------------
# Base model


def pretrain_toy_base(cfg: RunConfig, encoder) -> ToyBackend:
    """Train a toy backend on gesture-free captions of all glyph classes.

    This plays the role of the generic pretrained text-to-image model: it
    learns layout and texture words but never sees a gesture name.
    """
    pc = cfg.backend.pretrain
    schedule = make_schedule_for(cfg)
    backend = ToyBackend(schedule, ToyBackendConfig(
        image_size=cfg.backend.image_size, n_tokens=cfg.encoder.n_tokens,
        d_text=cfg.encoder.d_text, width=cfg.backend.width, seed=pc.seed,
    ))
    corpus = render_pretraining_corpus(pc.n_images, cfg.backend.image_size, pc.seed)
    x_all = torch.from_numpy(np.stack([img for img, _ in corpus]))
    e_all = torch.from_numpy(np.stack([encoder.encode(cap).data for _, cap in corpus]))
    gen = torch.Generator().manual_seed(pc.seed)
    backend.train_mode(True)
    opt = torch.optim.Adam(backend.parameters(), lr=pc.lr)
    from .diffusion import per_sample_loss

    for epoch in range(pc.epochs):
        perm = torch.randperm(len(corpus), generator=gen)
        total = 0.0
        for lo in range(0, len(corpus), pc.batch_size):
            idx = perm[lo:lo + pc.batch_size]
            t = torch.randint(0, schedule.n_steps, (len(idx),), generator=gen)
            eps = torch.randn(x_all[idx].shape, generator=gen)
            opt.zero_grad(set_to_none=True)
            loss = per_sample_loss(backend, x_all[idx], e_all[idx], eps, t, schedule).mean()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(backend.parameters(), 1.0)
            opt.step()
            total += loss.item() * len(idx)
        log.info("pretrain epoch %d/%d: mean loss %.5f", epoch + 1, pc.epochs, total / len(corpus))
    backend.train_mode(False)
    return backend


def base_key(cfg: RunConfig) -> str:
    return config_hash({"backend": asdict(cfg.backend), "encoder": asdict(cfg.encoder), "v": FORMAT_VERSION})


def load_base_backend(cfg: RunConfig) -> ToyBackend:
    """The configured checkpoint, or a cached pretrained toy base."""
    if cfg.backend.checkpoint:
        return load_checkpoint(cfg.backend.checkpoint)
    key = base_key(cfg)
    path = Path(cfg.run_dir) / f"base-{key[:8]}"
    if (path / "manifest.json").exists():
        return load_checkpoint(path)
    backend = pretrain_toy_base(cfg, make_encoder(cfg))
    save_checkpoint(backend, path)
    return load_checkpoint(path)


# ---------------------------------------------------------------------------
# Pipeline


def _stage_done(directory: Path, key: str) -> bool:
    marker = directory / "stage.json"
    return marker.exists() and read_json(marker).get("key") == key


def _mark(directory: Path, key: str, **info: Any) -> None:
    write_json(directory / "stage.json", {"key": key, "format_version": FORMAT_VERSION, **info})


def _load_embeddings(directory: Path) -> dict[str, OptimizedEmbedding]:
    index = read_json(directory / "index.json")
    out = {}
    for pid, entry in index["embeddings"].items():
        emb = OptimizedEmbedding(load_tensor(directory / entry["file"]), pair_id=pid, frozen=True)
        if emb.digest() != entry["hash"]:
            raise ValueError(f"embedding {pid} does not match its recorded hash")
        out[pid] = emb
    return out


def _embedding_file(pair_id: str) -> str:
    return "".join(c if c.isalnum() or c in "-_." else "_" for c in pair_id) + ".tsr"


def run_pipeline(cfg: RunConfig, evaluate: bool = True, stop_after: str | None = None) -> dict[str, Any]:
    """Stage I -> II -> III (and optional evaluation) for one gesture.

    Returns the run manifest, which is also written to `manifest.json`, on
    success and on failure alike.
    """
    cfg_hash = cfg.digest()
    run_dir = run_directory(cfg.run_dir, cfg_hash)
    with run_lock(run_dir):
        return _run_locked(cfg, cfg_hash, run_dir, evaluate, stop_after)


def _run_locked(cfg: RunConfig, cfg_hash: str, run_dir: Path, evaluate: bool, stop_after: str | None) -> dict[str, Any]:
    manifest: dict[str, Any] = {
        "format_version": FORMAT_VERSION,
        "config_hash": cfg_hash,
        "config": cfg.to_dict(),
        "status": "running",
        "stages": {},
    }
    write_json(run_dir / "manifest.json", manifest)
    try:
        _run_stages(cfg, run_dir, manifest, evaluate, stop_after)
        manifest["status"] = "complete" if stop_after is None else f"stopped after {stop_after}"
    except BaseException as exc:
        manifest["status"] = "failed"
        manifest["failure"] = {"stage": manifest.get("current_stage"), "error": f"{type(exc).__name__}: {exc}"}
        raise
    finally:
        manifest.pop("current_stage", None)
        write_json(run_dir / "manifest.json", manifest)
    return manifest


def _run_stages(cfg: RunConfig, run_dir: Path, manifest: dict, evaluate: bool, stop_after: str | None) -> None:
    encoder = make_encoder(cfg)
    fingerprint = dataset_fingerprint(cfg.dataset_dir)
    manifest["dataset_fingerprint"] = fingerprint
    pairs = load_pairs(cfg.dataset_dir, cfg.gesture_id, "train", cfg.train_size)
    if not pairs:
        raise ValueError(f"no training pairs for gesture {cfg.gesture_id!r} in {cfg.dataset_dir}")
    manifest["n_train_pairs"] = len(pairs)

    # Stage I
    manifest["current_stage"] = "stage1"
    key1 = config_hash({
        "dataset": fingerprint, "gesture": cfg.gesture_id, "train_size": cfg.train_size,
        "stage1": asdict(cfg.stage1), "lambda": cfg.lambda_, "mu": cfg.mu_infer, "seed": cfg.seed,
        "d_text": cfg.encoder.d_text,
    })
    bundle_dir = run_dir / "bundle"
    if _stage_done(bundle_dir, key1):
        bundle = GestureBundle.load(bundle_dir)
        reused1 = True
    else:
        t0 = time.perf_counter()
        mean = mean_gesture_feature(
            [p.image for p in pairs], make_recognizer(cfg.stage1.recognizer), cfg.gesture_id,
            cfg.stage1.confidence_floor, ids=[p.pair_id for p in pairs],
        )
        bundle = GestureBundle.create(mean, cfg.encoder.d_text, FusionConfig(cfg.lambda_, cfg.mu_infer), cfg.seed)
        bundle.save(bundle_dir)
        _mark(bundle_dir, key1, seconds=time.perf_counter() - t0)
        reused1 = False
    manifest["stages"]["stage1"] = {
        "reused": reused1, "n_source_images": bundle.mean_feature.n_source_images,
        "projection_hash": bundle.projection.digest(), "bundle": "bundle/",
    }
    if stop_after == "stage1":
        return
    fusion_bundle = bundle if cfg.feature_fusion else None

    # Stage II
    manifest["current_stage"] = "stage2"
    backend = load_base_backend(cfg)
    schedule = backend.schedule
    emb_dir = run_dir / "embeddings"
    s2 = cfg.stage2
    key2 = config_hash({
        "stage1": key1, "stage2": asdict(s2), "fusion": cfg.feature_fusion,
        "optimize": cfg.embedding_optimization, "base": backend.param_hash(),
        "encoder": asdict(cfg.encoder),
    })
    stage2_cfg = StageIIConfig(
        epochs=s2.epochs if cfg.embedding_optimization else 0, learning_rate=s2.lr,
        samples_per_epoch=s2.samples_per_epoch, lambda_train=cfg.lambda_,
        grad_clip=s2.grad_clip, chunk_size=s2.chunk_size, seed=cfg.seed,
    )
    if _stage_done(emb_dir, key2):
        embeddings = _load_embeddings(emb_dir)
        info2 = read_json(emb_dir / "stage.json")["summary"]
        info2["reused"] = True
    else:
        proj_before = bundle.projection.digest()
        res = optimize_embeddings(pairs, fusion_bundle, backend, schedule, stage2_cfg, encoder)
        embeddings = res.embeddings
        index = {}
        for pid, emb in embeddings.items():
            fname = _embedding_file(pid)
            save_tensor(emb_dir / fname, emb.data)
            index[pid] = {
                "file": fname, "hash": emb.digest(), "epoch_losses": res.epoch_losses[pid],
            }
        write_json(emb_dir / "index.json", {"format_version": FORMAT_VERSION, "embeddings": index})
        with_losses = [v for v in res.epoch_losses.values() if v]
        info2 = {
            "backend_hash_start": res.backend_hash_start,
            "backend_hash_end": res.backend_hash_end,
            "projection_hash_start": proj_before,
            "projection_hash_end": bundle.projection.digest(),
            "n_embeddings": len(embeddings),
            "mean_initial_loss": float(np.mean([v[0] for v in with_losses])) if with_losses else None,
            "mean_final_loss": float(np.mean([v[-1] for v in with_losses])) if with_losses else None,
            "fraction_descended": float(np.mean([v[-1] <= v[0] for v in with_losses])) if with_losses else None,
            "seconds": res.seconds,
        }
        _mark(emb_dir, key2, summary=info2)
        info2 = dict(info2, reused=False)
    if set(embeddings) != {p.pair_id for p in pairs}:
        raise ValueError("stage II embeddings do not match the training pairs one-to-one")
    manifest["stages"]["stage2"] = info2
    if stop_after == "stage2":
        return

    # Stage III
    manifest["current_stage"] = "stage3"
    ckpt_dir = run_dir / "checkpoints"
    s3 = cfg.stage3
    key3 = config_hash({"stage2": key2, "stage3": asdict(s3), "seed": cfg.seed})
    if _stage_done(ckpt_dir, key3):
        backend = load_checkpoint(ckpt_dir / "final")
        info3 = dict(read_json(ckpt_dir / "stage.json")["summary"], reused=True)
    else:
        last_good = ckpt_dir / "last_good"

        def keep(epoch: int, loss: float, state: dict) -> None:
            save_checkpoint(backend, last_good)

        res3 = finetune_backend(
            pairs, embeddings, backend, schedule,
            StageIIIConfig(s3.epochs, s3.lr, s3.batch_size, s3.grad_clip, cfg.seed),
            bundle=bundle, on_epoch=keep,
        )
        save_checkpoint(backend, ckpt_dir / "final")
        info3 = {
            "backend_hash_start": res3.backend_hash_start,
            "backend_hash_end": res3.backend_hash_end,
            "embedding_hashes_unchanged": True,
            "projection_hash": res3.projection_hash,
            "epoch_losses": res3.epoch_losses,
            "seconds": res3.seconds,
        }
        _mark(ckpt_dir, key3, summary=info3)
        info3 = dict(info3, reused=False)
    manifest["stages"]["stage3"] = info3
    manifest["checkpoint"] = "checkpoints/final/"
    if stop_after == "stage3" or not evaluate:
        return

    manifest["current_stage"] = "eval"
    report = evaluate_run(cfg, run_dir, backend, fusion_bundle, encoder)
    manifest["report"] = report.to_dict()


def evaluate_run(cfg: RunConfig, run_dir: Path, backend, bundle, encoder) -> MetricReport:
    """Generate one image per test prompt and score it against the test images."""
    records = sorted(
        (r for r in read_manifest(cfg.dataset_dir) if r.gesture_id == cfg.gesture_id and r.split == "test"),
        key=lambda r: r.pair_id,
    )
    if cfg.eval.n_samples is not None:
        records = records[:cfg.eval.n_samples]
    seeds = [cfg.seed * 1_000_003 + i for i in range(len(records))]
    generated = generate_batch(
        [r.enriched_caption for r in records], bundle, backend, backend.schedule, encoder,
        cfg.mu_infer, seeds, cfg.eval.n_infer_steps,
    )
    generated = [adapters.quantize(g) for g in generated]
    for r, img in zip(records, generated):
        adapters.save_png(run_dir / "samples" / f"{r.pair_id}.png", img)
    save_contact_sheet(run_dir / "samples" / "grid.png", generated[:64])
    real = [load_image(cfg.dataset_dir, r) for r in records]
    report = evaluate_sets(
        real, generated, make_recognizer(cfg.stage1.recognizer), make_extractor(cfg),
        cfg.eval.patch_size, cfg.eval.kid_subset_size, cfg.eval.kid_subsets, cfg.seed, cfg.digest(),
    )
    report.save(run_dir / "reports" / "metrics.json")
    return report


def save_contact_sheet(path: str | os.PathLike, images, columns: int = 8, pad: int = 1) -> Path | None:
    if not len(images):
        return None
    c, h, w = np.asarray(images[0]).shape
    rows = -(-len(images) // columns)
    cols = min(columns, len(images))
    sheet = np.ones((c, rows * (h + pad) + pad, cols * (w + pad) + pad), dtype=np.float32)
    for k, img in enumerate(images):
        r, q = divmod(k, columns)
        sheet[:, pad + r * (h + pad):pad + r * (h + pad) + h, pad + q * (w + pad):pad + q * (w + pad) + w] = img
    return adapters.save_png(path, sheet)
