"""Stage II (per-pair embedding optimization against a frozen backend) and
Stage III (backend fine-tuning on frozen optimized embeddings), plus the
inference path that conditions on a freshly built double-fused embedding.
"""

from __future__ import annotations

import copy
import hashlib
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from .artifacts import OptimizedEmbedding, TextEmbedding, TrainingPair
from .diffusion import DivergenceError, NoiseSchedule, ddim_sample_batch, per_sample_loss
from .fusion import GestureBundle, TextEncoderAdapter, build_double_fused

log = logging.getLogger(__name__)


class FreezeViolation(RuntimeError):
    """A parameter set that must stay fixed during a stage was modified."""


class MissingEmbeddingError(KeyError):
    pass


@dataclass(frozen=True)
class StageIIConfig:
    epochs: int = 10
    learning_rate: float = 1e-3
    samples_per_epoch: int = 8
    lambda_train: float = 0.7
    grad_clip: float | None = 1.0
    chunk_size: int = 512
    seed: int = 0

    def __post_init__(self) -> None:
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.samples_per_epoch < 1 or self.chunk_size < 1:
            raise ValueError("samples_per_epoch and chunk_size must be >= 1")


@dataclass(frozen=True)
class StageIIIConfig:
    epochs: int = 20
    learning_rate: float = 1e-6
    batch_size: int = 4
    grad_clip: float | None = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class StageIIResult:
    embeddings: dict[str, OptimizedEmbedding]
    epoch_losses: dict[str, list[float]]
    backend_hash_start: str
    backend_hash_end: str
    seconds: float

    def initial_loss(self, pair_id: str) -> float:
        return self.epoch_losses[pair_id][0]

    def final_loss(self, pair_id: str) -> float:
        return self.epoch_losses[pair_id][-1]


@dataclass
class StageIIIResult:
    epoch_losses: list[float] = field(default_factory=list)
    backend_hash_start: str = ""
    backend_hash_end: str = ""
    embedding_hashes: dict[str, str] = field(default_factory=dict)
    projection_hash: str | None = None
    seconds: float = 0.0
    failed_at: str | None = None


def stream_generator(seed: int, stream: str) -> torch.Generator:
    """Generator for one named stream of a run; distinct streams never share draws."""
    digest = hashlib.sha256(f"{seed}:{stream}".encode("utf-8")).digest()
    return torch.Generator().manual_seed(int.from_bytes(digest[:8], "little") & (2**63 - 1))


def _stack_images(pairs: Sequence[TrainingPair]) -> torch.Tensor:
    return torch.from_numpy(np.stack([p.image for p in pairs]))


def stratified_timesteps(gen: torch.Generator, epochs: int, per_epoch: int, n_steps: int) -> torch.Tensor:
    """Low-discrepancy timesteps: each epoch covers `per_epoch` equal strata once.

    One uniform offset per epoch shifts a regular grid over [0, 1); the
    visiting order within the epoch is shuffled. Marginally every t is still
    uniform, but epoch means no longer swing with which noise levels happened
    to be drawn.
    """
    out = torch.empty(epochs * per_epoch, dtype=torch.long)
    grid = torch.arange(per_epoch, dtype=torch.float64)
    for e in range(epochs):
        u = torch.rand((), generator=gen, dtype=torch.float64)
        t = ((u + grid) / per_epoch * n_steps).floor().long().clamp_(0, n_steps - 1)
        out[e * per_epoch:(e + 1) * per_epoch] = t[torch.randperm(per_epoch, generator=gen)]
    return out


def initial_embedding(
    pair: TrainingPair,
    encoder: TextEncoderAdapter,
    bundle: GestureBundle | None,
    lambda_train: float,
) -> TextEmbedding:
    """Double-fused embedding of the caption, or the raw text embedding without a bundle."""
    if bundle is None:
        return encoder.encode(pair.caption)
    return build_double_fused(pair.caption, bundle, encoder, lambda_train)


def optimize_embeddings(
    pairs: Sequence[TrainingPair],
    bundle: GestureBundle | None,
    backend,
    schedule: NoiseSchedule,
    cfg: StageIIConfig,
    encoder: TextEncoderAdapter,
    on_chunk: Callable[[int, int], None] | None = None,
) -> StageIIResult:
    """Fit one conditioning embedding per pair with the backend frozen.

    Pairs are processed in chunks that share forward passes; Adam acts
    elementwise and clipping is applied per pair, so each pair follows the
    trajectory it would have on its own. Every pair draws its timesteps and
    noise from a generator seeded by `(cfg.seed, pair_id)`.
    """
    t0 = time.perf_counter()
    backend.train_mode(False)
    start_hash = backend.param_hash()
    embeddings: dict[str, OptimizedEmbedding] = {}
    losses: dict[str, list[float]] = {}
    n_samples = cfg.epochs * cfg.samples_per_epoch
    ordered = sorted(pairs, key=lambda p: p.pair_id)

    for lo in range(0, len(ordered), cfg.chunk_size):
        chunk = ordered[lo:lo + cfg.chunk_size]
        init = np.stack([initial_embedding(p, encoder, bundle, cfg.lambda_train).data for p in chunk])
        if n_samples == 0:
            for p, e in zip(chunk, init):
                embeddings[p.pair_id] = OptimizedEmbedding(e, pair_id=p.pair_id, frozen=True)
                losses[p.pair_id] = []
            continue
        x = _stack_images(chunk)
        draws = []
        for p in chunk:
            gen = stream_generator(cfg.seed, p.pair_id)
            t = stratified_timesteps(gen, cfg.epochs, cfg.samples_per_epoch, schedule.n_steps)
            eps = torch.randn((n_samples,) + tuple(p.image.shape), generator=gen)
            draws.append((t, eps))
        ts = torch.stack([d[0] for d in draws], dim=1)  # [n_samples, B]
        epss = torch.stack([d[1] for d in draws], dim=1)  # [n_samples, B, C, H, W]

        emb = torch.tensor(init, requires_grad=True)
        opt = torch.optim.Adam([emb], lr=cfg.learning_rate)
        epoch_sum = torch.zeros(cfg.epochs, len(chunk), dtype=torch.float64)
        for k in range(n_samples):
            opt.zero_grad(set_to_none=True)
            per_pair = per_sample_loss(backend, x, emb, epss[k], ts[k], schedule)
            bad = ~torch.isfinite(per_pair)
            if bad.any():
                raise DivergenceError(f"stage II: non-finite loss for pair {chunk[int(bad.nonzero()[0])].pair_id} at sample {k}")
            epoch_sum[k // cfg.samples_per_epoch] += per_pair.detach().double()
            per_pair.sum().backward()
            if cfg.grad_clip is not None:
                with torch.no_grad():
                    norms = emb.grad.reshape(len(chunk), -1).norm(dim=1)
                    scale = torch.clamp(cfg.grad_clip / (norms + 1e-6), max=1.0)
                    emb.grad.mul_(scale[:, None, None])
            opt.step()
        means = (epoch_sum / cfg.samples_per_epoch).T
        final = emb.detach().numpy()
        for i, p in enumerate(chunk):
            embeddings[p.pair_id] = OptimizedEmbedding(final[i], pair_id=p.pair_id, frozen=True)
            losses[p.pair_id] = [float(v) for v in means[i]]
        if on_chunk is not None:
            on_chunk(lo + len(chunk), len(ordered))

    end_hash = backend.param_hash()
    if end_hash != start_hash:
        raise FreezeViolation("stage II modified backend parameters")
    return StageIIResult(embeddings, losses, start_hash, end_hash, time.perf_counter() - t0)


def optimize_embedding(
    pair: TrainingPair,
    bundle: GestureBundle | None,
    backend,
    schedule: NoiseSchedule,
    cfg: StageIIConfig,
    encoder: TextEncoderAdapter,
) -> tuple[OptimizedEmbedding, list[float]]:
    res = optimize_embeddings([pair], bundle, backend, schedule, cfg, encoder)
    return res.embeddings[pair.pair_id], res.epoch_losses[pair.pair_id]


def finetune_backend(
    pairs: Sequence[TrainingPair],
    embeddings: dict[str, OptimizedEmbedding],
    backend,
    schedule: NoiseSchedule,
    cfg: StageIIIConfig,
    bundle: GestureBundle | None = None,
    on_epoch: Callable[[int, float, dict], None] | None = None,
) -> StageIIIResult:
    """Fine-tune `backend` in place on (image, frozen embedding) pairs.

    `on_epoch(epoch, mean_loss, state_dict)` is called after each completed
    epoch so callers can persist a last-good checkpoint. On a non-finite
    loss the backend is restored to the last completed epoch and
    `DivergenceError` is raised.
    """
    t0 = time.perf_counter()
    ordered = sorted(pairs, key=lambda p: p.pair_id)
    missing = [p.pair_id for p in ordered if p.pair_id not in embeddings]
    if missing:
        raise MissingEmbeddingError(f"no optimized embedding for {len(missing)} pairs, e.g. {missing[:3]}")
    not_frozen = [p.pair_id for p in ordered if not embeddings[p.pair_id].frozen]
    if not_frozen:
        raise ValueError(f"embeddings must be frozen before stage III: {not_frozen[:3]}")

    result = StageIIIResult(backend_hash_start=backend.param_hash())
    result.embedding_hashes = {p.pair_id: embeddings[p.pair_id].digest() for p in ordered}
    result.projection_hash = bundle.projection.digest() if bundle is not None else None

    x_all = _stack_images(ordered)
    # read-only numpy views are copied once; nothing downstream can write back
    e_all = torch.from_numpy(np.stack([embeddings[p.pair_id].data for p in ordered]).copy())
    # hashed so the stream never replays base pretraining or sampling draws
    gen = stream_generator(cfg.seed, "stage3")
    backend.train_mode(True)
    opt = torch.optim.Adam(backend.parameters(), lr=cfg.learning_rate)
    last_good = copy.deepcopy(backend.state_dict())
    n = len(ordered)
    try:
        for epoch in range(cfg.epochs):
            perm = torch.randperm(n, generator=gen)
            total, count = 0.0, 0
            for lo in range(0, n, cfg.batch_size):
                idx = perm[lo:lo + cfg.batch_size]
                x = x_all[idx]
                t = torch.randint(0, schedule.n_steps, (len(idx),), generator=gen)
                eps = torch.randn(x.shape, generator=gen)
                opt.zero_grad(set_to_none=True)
                try:
                    loss = per_sample_loss(backend, x, e_all[idx], eps, t, schedule).mean()
                    if not torch.isfinite(loss):
                        raise DivergenceError("non-finite loss")
                except DivergenceError as exc:
                    backend.load_state_dict(last_good)
                    result.failed_at = f"epoch {epoch + 1}, batch {lo // cfg.batch_size}"
                    raise DivergenceError(f"stage III: {exc} at {result.failed_at}; restored last good state") from exc
                loss.backward()
                if cfg.grad_clip is not None:
                    torch.nn.utils.clip_grad_norm_(backend.parameters(), cfg.grad_clip)
                opt.step()
                total += loss.item() * len(idx)
                count += len(idx)
            mean = total / max(count, 1)
            result.epoch_losses.append(mean)
            last_good = copy.deepcopy(backend.state_dict())
            log.info("stage III epoch %d/%d: mean loss %.5f", epoch + 1, cfg.epochs, mean)
            if on_epoch is not None:
                on_epoch(epoch + 1, mean, last_good)
    finally:
        backend.train_mode(False)

    after = {p.pair_id: embeddings[p.pair_id].digest() for p in ordered}
    if after != result.embedding_hashes:
        raise FreezeViolation("stage III modified optimized embeddings")
    if bundle is not None and bundle.projection.digest() != result.projection_hash:
        raise FreezeViolation("stage III modified projection weights")
    result.backend_hash_end = backend.param_hash()
    result.seconds = time.perf_counter() - t0
    return result


def conditioning(
    prompt: str,
    bundle: GestureBundle | None,
    encoder: TextEncoderAdapter,
    mu: float,
) -> TextEmbedding:
    """Inference conditioning; without a bundle this is the raw text embedding."""
    if bundle is None:
        return encoder.encode(prompt)
    return build_double_fused(prompt, bundle, encoder, mu)


def generate_batch(
    prompts: Sequence[str],
    bundle: GestureBundle | None,
    backend,
    schedule: NoiseSchedule,
    encoder: TextEncoderAdapter,
    mu: float,
    seeds: Sequence[int],
    n_infer_steps: int = 50,
    batch_size: int = 1,
) -> np.ndarray:
    """One image per (prompt, seed).

    The default batch size of 1 keeps every image bitwise independent of
    which other prompts it was generated with; CPU convolution kernels do
    not guarantee identical bits for a row at different batch positions.
    """
    backend.train_mode(False)
    conds = np.stack([conditioning(p, bundle, encoder, mu).data for p in prompts])
    out = []
    for lo in range(0, len(prompts), batch_size):
        e = torch.from_numpy(conds[lo:lo + batch_size].copy())
        out.append(ddim_sample_batch(backend, e, schedule, n_infer_steps, list(seeds[lo:lo + batch_size])).numpy())
    return np.concatenate(out) if out else np.zeros((0,) + tuple(backend.image_shape), dtype=np.float32)


def generate(
    prompt: str,
    bundle: GestureBundle | None,
    backend,
    schedule: NoiseSchedule,
    encoder: TextEncoderAdapter,
    mu: float,
    seed: int,
    n_infer_steps: int = 50,
) -> np.ndarray:
    return generate_batch([prompt], bundle, backend, schedule, encoder, mu, [seed], n_infer_steps)[0]
