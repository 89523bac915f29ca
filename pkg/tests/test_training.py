import hashlib

import numpy as np
import pytest
import torch

from handfusion.artifacts import OptimizedEmbedding
from handfusion.diffusion import DivergenceError, ToyBackend, ToyBackendConfig
from handfusion.fusion import build_double_fused
from handfusion.training import (
    FreezeViolation,
    MissingEmbeddingError,
    StageIIConfig,
    StageIIIConfig,
    finetune_backend,
    generate,
    generate_batch,
    initial_embedding,
    optimize_embedding,
    optimize_embeddings,
    stratified_timesteps,
)


def fresh(schedule, seed=3):
    return ToyBackend(schedule, ToyBackendConfig(width=8, emb_dim=16, seed=seed))


class MutatingBackend(ToyBackend):
    """Nudges its own weights on every prediction: a freeze-contract violator."""

    def predict(self, z_t, t, e_cond):
        with torch.no_grad():
            self.conv_out.bias.add_(1e-4)
        return super().forward(z_t, t, e_cond)


class FlakyBackend(ToyBackend):
    """Produces NaN from the `fail_at`-th prediction on."""

    fail_at = 10**9

    def predict(self, z_t, t, e_cond):
        self.calls = getattr(self, "calls", 0) + 1
        out = super().forward(z_t, t, e_cond)
        return out * float("nan") if self.calls >= self.fail_at else out


def test_stratified_timesteps_cover_strata():
    gen = torch.Generator().manual_seed(0)
    t = stratified_timesteps(gen, 5, 8, 1000)
    assert t.shape == (40,)
    for e in range(5):
        strata = sorted((t[e * 8:(e + 1) * 8] // 125).tolist())
        assert strata == list(range(8))
    assert t.min() >= 0 and t.max() < 1000


def test_stage2_zero_epochs_returns_initial(pairs, bundle, schedule, encoder):
    b = fresh(schedule)
    emb, losses = optimize_embedding(pairs[0], bundle, b, schedule, StageIIConfig(epochs=0), encoder)
    init = build_double_fused(pairs[0].caption, bundle, encoder, 0.7)
    assert emb.data.tobytes() == init.data.tobytes()
    assert emb.frozen and emb.pair_id == pairs[0].pair_id and losses == []


def test_stage2_freeze_and_determinism(pairs, bundle, schedule, encoder):
    b = fresh(schedule)
    h = b.param_hash()
    cfg = StageIIConfig(epochs=2, learning_rate=1e-2, seed=4)
    r1 = optimize_embeddings(pairs, bundle, b, schedule, cfg, encoder)
    assert r1.backend_hash_start == r1.backend_hash_end == h == b.param_hash()
    r2 = optimize_embeddings(list(reversed(pairs)), bundle, b, schedule, cfg, encoder)
    for p in pairs:
        assert r1.embeddings[p.pair_id].digest() == r2.embeddings[p.pair_id].digest()
        assert len(r1.epoch_losses[p.pair_id]) == 2
    assert set(r1.embeddings) == {p.pair_id for p in pairs}


def test_stage2_chunking_does_not_change_results(pairs, bundle, schedule, encoder):
    b = fresh(schedule)
    whole = optimize_embeddings(pairs, bundle, b, schedule, StageIIConfig(epochs=2, learning_rate=1e-2), encoder)
    chunked = optimize_embeddings(pairs, bundle, b, schedule, StageIIConfig(epochs=2, learning_rate=1e-2, chunk_size=2), encoder)
    single = optimize_embedding(pairs[3], bundle, b, schedule, StageIIConfig(epochs=2, learning_rate=1e-2), encoder)[0]
    for p in pairs:
        assert np.allclose(whole.embeddings[p.pair_id].data, chunked.embeddings[p.pair_id].data, atol=1e-6)
    assert np.allclose(whole.embeddings[pairs[3].pair_id].data, single.data, atol=1e-6)


def test_stage2_without_bundle_starts_from_text(pairs, schedule, encoder):
    init = initial_embedding(pairs[0], encoder, None, 0.7)
    assert np.array_equal(init.data, encoder.encode(pairs[0].caption).data)


def test_stage2_freeze_violation(pairs, bundle, schedule, encoder):
    b = MutatingBackend(schedule, ToyBackendConfig(width=8, emb_dim=16))
    with pytest.raises(FreezeViolation):
        optimize_embeddings(pairs[:1], bundle, b, schedule, StageIIConfig(epochs=1), encoder)


def test_stage2_divergence(pairs, bundle, schedule, encoder):
    b = FlakyBackend(schedule, ToyBackendConfig(width=8, emb_dim=16))
    b.fail_at = 3
    with pytest.raises(DivergenceError):
        optimize_embeddings(pairs[:2], bundle, b, schedule, StageIIConfig(epochs=1), encoder)


def _embeddings(pairs, encoder):
    return {p.pair_id: OptimizedEmbedding(encoder.encode(p.caption).data, pair_id=p.pair_id) for p in pairs}


def test_stage3_zero_epochs_is_noop(pairs, schedule, encoder):
    b = fresh(schedule)
    h = b.param_hash()
    res = finetune_backend(pairs, _embeddings(pairs, encoder), b, schedule, StageIIIConfig(epochs=0))
    assert res.backend_hash_end == h == res.backend_hash_start


def test_stage3_trains_and_keeps_embeddings(pairs, bundle, schedule, encoder):
    b = fresh(schedule)
    embs = _embeddings(pairs, encoder)
    before = {k: v.digest() for k, v in embs.items()}
    seen = []
    res = finetune_backend(pairs, embs, b, schedule, StageIIIConfig(epochs=2, learning_rate=1e-3),
                           bundle=bundle, on_epoch=lambda e, l, s: seen.append(e))
    assert seen == [1, 2] and len(res.epoch_losses) == 2
    assert res.backend_hash_end != res.backend_hash_start
    assert {k: v.digest() for k, v in embs.items()} == before == res.embedding_hashes
    assert res.projection_hash == bundle.projection.digest()
    assert not any(p.requires_grad for p in b.parameters())


def test_stage3_is_reproducible(pairs, schedule, encoder):
    embs = _embeddings(pairs, encoder)
    cfg = StageIIIConfig(epochs=2, learning_rate=1e-3, seed=9)
    a, b = fresh(schedule), fresh(schedule)
    ra = finetune_backend(pairs, embs, a, schedule, cfg)
    rb = finetune_backend(list(reversed(pairs)), embs, b, schedule, cfg)
    assert ra.epoch_losses == rb.epoch_losses and a.param_hash() == b.param_hash()


def test_stage3_missing_or_unfrozen_embedding(pairs, schedule, encoder):
    embs = _embeddings(pairs[1:], encoder)
    b = fresh(schedule)
    h = b.param_hash()
    with pytest.raises(MissingEmbeddingError):
        finetune_backend(pairs, embs, b, schedule, StageIIIConfig(epochs=1))
    assert b.param_hash() == h
    loose = _embeddings(pairs, encoder)
    loose[pairs[0].pair_id] = OptimizedEmbedding(loose[pairs[0].pair_id].data, pair_id=pairs[0].pair_id, frozen=False)
    with pytest.raises(ValueError):
        finetune_backend(pairs, loose, b, schedule, StageIIIConfig(epochs=1))


def test_stage3_divergence_restores_last_good(pairs, schedule, encoder):
    b = FlakyBackend(schedule, ToyBackendConfig(width=8, emb_dim=16, seed=3))
    b.fail_at = 3  # 6 pairs / batch 4 = 2 predictions per epoch; epoch 2 fails
    snapshots = []
    with pytest.raises(DivergenceError, match="epoch 2"):
        finetune_backend(pairs, _embeddings(pairs, encoder), b, schedule, StageIIIConfig(epochs=3, learning_rate=1e-3),
                         on_epoch=lambda e, l, s: snapshots.append(b.param_hash()))
    assert snapshots and b.param_hash() == snapshots[-1]


def _hash(img):
    return hashlib.sha256(np.ascontiguousarray(img).tobytes()).hexdigest()


def test_generate_endpoint_and_determinism(bundle, schedule, encoder):
    b = fresh(schedule)
    prompt = "a small glyph at the center on a plain background, making a phone call hand gesture"
    fused = generate(prompt, bundle, b, schedule, encoder, 1.0, seed=3, n_infer_steps=10)
    raw = generate(prompt, None, b, schedule, encoder, 1.0, seed=3, n_infer_steps=10)
    assert _hash(fused) == _hash(raw)
    again = generate(prompt, bundle, b, schedule, encoder, 0.4, seed=3, n_infer_steps=10)
    assert _hash(again) == _hash(generate(prompt, bundle, b, schedule, encoder, 0.4, seed=3, n_infer_steps=10))


def test_generate_mu_sweep_distinct(bundle, schedule, encoder):
    b = fresh(schedule)
    prompt = "a large glyph at the top left on a noisy background, making a phone call hand gesture"
    imgs = generate_batch([prompt] * 3, bundle, b, schedule, encoder, 0.5, [0, 0, 0], 10)
    assert len({_hash(i) for i in imgs}) == 1
    sweep = [generate(prompt, bundle, b, schedule, encoder, mu, seed=0, n_infer_steps=10) for mu in (0.1, 0.5, 0.9)]
    assert len({_hash(i) for i in sweep}) == 3
