"""Variance-preserving diffusion machinery with an x-prediction backend.

The forward process is `z_t = alpha[t] * x + sigma[t] * eps` with
`alpha^2 + sigma^2 = 1`. Backends predict the clean image `x` directly and
are trained with the weighted squared error `w[t] * mean((x_hat - x)^2)`.
"""

from __future__ import annotations

import copy
import hashlib
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Protocol, runtime_checkable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import adapters
from .artifacts import FORMAT_VERSION, check_version, load_tensor, read_json, save_tensor, write_json

SCHEDULE_KINDS = ("cosine", "linear-beta")


class DivergenceError(FloatingPointError):
    """A prediction, loss or sampler state became non-finite."""


# ---------------------------------------------------------------------------
# Noise schedule


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    n_steps: int
    alpha: np.ndarray
    sigma: np.ndarray
    w: np.ndarray
    config: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        for name in ("alpha", "sigma", "w"):
            arr = np.array(getattr(self, name), dtype=np.float64, copy=True)
            if arr.shape != (self.n_steps,):
                raise ValueError(f"{name} must have shape ({self.n_steps},), got {arr.shape}")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def with_weights(self, w: np.ndarray) -> "NoiseSchedule":
        return NoiseSchedule(self.n_steps, self.alpha, self.sigma, w, dict(self.config, weights="custom"))

    def tensors(self, dtype: torch.dtype = torch.float32) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        return (
            torch.tensor(self.alpha, dtype=dtype),
            torch.tensor(self.sigma, dtype=dtype),
            torch.tensor(self.w, dtype=dtype),
        )


def make_schedule(
    n_steps: int = 1000,
    kind: str = "cosine",
    beta_start: float = 1e-4,
    beta_end: float = 0.02,
    cosine_offset: float = 0.008,
    max_beta: float = 0.999,
) -> NoiseSchedule:
    """Tabulate `alpha[t] = sqrt(prod_{s<=t} (1 - beta_s))` and `sigma = sqrt(1 - alpha^2)`."""
    if not isinstance(n_steps, (int, np.integer)) or n_steps < 1:
        raise ValueError(f"n_steps must be an integer >= 1, got {n_steps!r}")
    if kind == "cosine":
        s = cosine_offset
        f = np.cos((np.arange(n_steps + 1) / n_steps + s) / (1 + s) * math.pi / 2) ** 2
        betas = np.clip(1.0 - f[1:] / f[:-1], 1e-8, max_beta)
        config = {"kind": kind, "n_steps": int(n_steps), "cosine_offset": s, "max_beta": max_beta}
    elif kind == "linear-beta":
        betas = np.linspace(beta_start, beta_end, n_steps, dtype=np.float64)
        config = {"kind": kind, "n_steps": int(n_steps), "beta_start": beta_start, "beta_end": beta_end}
    else:
        raise ValueError(f"unknown schedule kind {kind!r}; expected one of {SCHEDULE_KINDS}")
    alpha_bar = np.cumprod(1.0 - betas)
    return NoiseSchedule(int(n_steps), np.sqrt(alpha_bar), np.sqrt(1.0 - alpha_bar), np.ones(n_steps), config)


def schedule_from_config(config: dict) -> NoiseSchedule:
    cfg = dict(config)
    kind = cfg.pop("kind")
    n = cfg.pop("n_steps")
    cfg.pop("weights", None)
    return make_schedule(n, kind, **cfg)


def _check_t(t: torch.Tensor, schedule: NoiseSchedule) -> None:
    if t.numel() and (int(t.min()) < 0 or int(t.max()) >= schedule.n_steps):
        raise IndexError(f"timestep outside [0, {schedule.n_steps})")


def noisy_latent(x: Any, epsilon: Any, t: Any, schedule: NoiseSchedule) -> torch.Tensor:
    """`alpha[t] * x + sigma[t] * eps`; `t` is an int or a per-sample index vector."""
    x = torch.as_tensor(x)
    epsilon = torch.as_tensor(epsilon, dtype=x.dtype)
    if x.shape != epsilon.shape:
        raise ValueError(f"x {tuple(x.shape)} and epsilon {tuple(epsilon.shape)} differ in shape")
    t = torch.as_tensor(t, dtype=torch.long)
    _check_t(t, schedule)
    alpha, sigma, _ = schedule.tensors(x.dtype)
    a, s = alpha[t], sigma[t]
    if t.ndim == 1:
        shape = (-1,) + (1,) * (x.ndim - 1)
        a, s = a.reshape(shape), s.reshape(shape)
    return a * x + s * epsilon


# ---------------------------------------------------------------------------
# Backends


@runtime_checkable
class DiffusionBackend(Protocol):
    image_shape: tuple[int, ...]

    def predict(self, z_t: torch.Tensor, t: torch.Tensor, e_cond: torch.Tensor) -> torch.Tensor: ...

    def param_hash(self) -> str: ...

    def train_mode(self, on: bool) -> None: ...


def _timestep_features(t: torch.Tensor, n_steps: int, dim: int) -> torch.Tensor:
    frac = t.to(torch.float32) / max(n_steps - 1, 1)
    freqs = torch.exp(torch.linspace(0.0, math.log(100.0), dim // 2))
    ang = frac[:, None] * freqs[None, :] * math.pi
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=1)


@dataclass
class ToyBackendConfig:
    image_size: int = 16
    channels: int = 1
    n_tokens: int = 8
    d_text: int = 32
    width: int = 32
    emb_dim: int = 64
    time_features: int = 16
    seed: int = 0


class ToyBackend(nn.Module):
    """Two-level convolutional denoiser for small grayscale images.

    The conditioning matrix is flattened, projected, summed with a timestep
    embedding and added as a per-channel offset at both resolutions. The
    network output is combined with the input as
    `x_hat = alpha[t] * z_t + sigma[t] * net(z_t, t, e)`, which is exact at
    t = 0 and lets the net carry all of the prediction at high noise.
    """

    kind = "toy"

    def __init__(self, schedule: NoiseSchedule, config: ToyBackendConfig | None = None):
        super().__init__()
        self.config = config or ToyBackendConfig()
        self.schedule = schedule
        c = self.config
        w, e = c.width, c.emb_dim
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(c.seed)
            self.time_mlp = nn.Linear(c.time_features, e)
            self.cond_proj = nn.Linear(c.n_tokens * c.d_text, e)
            self.conv_in = nn.Conv2d(c.channels, w, 3, padding=1)
            self.hi_emb = nn.Linear(e, w)
            self.hi_conv = nn.Conv2d(w, w, 3, padding=1)
            self.down = nn.Conv2d(w, 2 * w, 3, stride=2, padding=1)
            self.lo_emb = nn.Linear(e, 2 * w)
            self.lo_conv = nn.Conv2d(2 * w, 2 * w, 3, padding=1)
            self.up = nn.ConvTranspose2d(2 * w, w, 4, stride=2, padding=1)
            self.merge = nn.Conv2d(2 * w, w, 3, padding=1)
            self.conv_out = nn.Conv2d(w, c.channels, 3, padding=1)
        alpha, sigma, _ = schedule.tensors()
        self.register_buffer("alpha", alpha, persistent=False)
        self.register_buffer("sigma", sigma, persistent=False)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        c = self.config
        return (c.channels, c.image_size, c.image_size)

    @property
    def cond_shape(self) -> tuple[int, int]:
        return (self.config.n_tokens, self.config.d_text)

    def forward(self, z_t: torch.Tensor, t: torch.Tensor, e_cond: torch.Tensor) -> torch.Tensor:
        squeeze = z_t.ndim == 3
        if squeeze:
            z_t, e_cond = z_t[None], e_cond[None]
        t = torch.as_tensor(t, dtype=torch.long).reshape(-1).expand(z_t.shape[0])
        emb = self.time_mlp(_timestep_features(t, self.schedule.n_steps, self.config.time_features).to(z_t.dtype))
        emb = F.silu(emb + self.cond_proj(e_cond.reshape(e_cond.shape[0], -1)))
        h = F.silu(self.conv_in(z_t))
        skip = F.silu(self.hi_conv(h) + self.hi_emb(emb)[:, :, None, None])
        lo = F.silu(self.down(skip))
        lo = F.silu(self.lo_conv(lo) + self.lo_emb(emb)[:, :, None, None])
        up = F.silu(self.up(lo))
        out = self.conv_out(F.silu(self.merge(torch.cat([up, skip], dim=1))))
        a = self.alpha[t].to(z_t.dtype)[:, None, None, None]
        s = self.sigma[t].to(z_t.dtype)[:, None, None, None]
        x_hat = a * z_t + s * out
        return x_hat[0] if squeeze else x_hat

    predict = forward

    def named_tensors(self) -> list[tuple[str, torch.Tensor]]:
        return sorted(self.named_parameters(), key=lambda kv: kv[0])

    def flat_parameters(self) -> torch.Tensor:
        return torch.cat([p.detach().reshape(-1) for _, p in self.named_tensors()])

    def param_hash(self) -> str:
        h = hashlib.sha256()
        for name, p in self.named_tensors():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.detach().cpu().numpy(), dtype="<f4").tobytes())
        return h.hexdigest()

    def train_mode(self, on: bool) -> None:
        self.train(on)
        for p in self.parameters():
            p.requires_grad_(on)

    def n_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())


class RemoteBackend:
    """Inference-only backend behind `POST /predict {z_t, t, e_cond} -> {x_hat}`."""

    kind = "remote"

    def __init__(self, image_shape: tuple[int, ...], url: str | None = None, name: str = "backend", timeout: float = 60.0):
        self.image_shape = tuple(image_shape)
        self.url = url or adapters.adapter_url(name)
        if not self.url:
            raise adapters.AdapterError(f"no URL configured for remote adapter {name!r}")
        self.timeout = timeout

    def predict(self, z_t: torch.Tensor, t: torch.Tensor, e_cond: torch.Tensor) -> torch.Tensor:
        url = self.url.rstrip("/") + "/predict"
        body = {
            "z_t": torch.as_tensor(z_t).tolist(),
            "t": torch.as_tensor(t).tolist(),
            "e_cond": torch.as_tensor(e_cond).tolist(),
        }
        x_hat = adapters.reply_field(adapters.post_json(url, body, self.timeout), "x_hat", url)
        out = torch.as_tensor(x_hat, dtype=torch.float32)
        if out.shape != torch.as_tensor(z_t).shape:
            raise adapters.AdapterError(f"{url}: x_hat shape {tuple(out.shape)} != z_t shape")
        return out

    def param_hash(self) -> str:
        reply = adapters.post_json(self.url.rstrip("/") + "/param_hash", {}, self.timeout)
        return str(adapters.reply_field(reply, "param_hash", self.url))

    def train_mode(self, on: bool) -> None:
        if on:
            raise NotImplementedError("remote fine-tuning goes through /step_optimizer on the service side")


# ---------------------------------------------------------------------------
# Loss


def per_sample_loss(backend, x, e_cond, epsilon, t, schedule: NoiseSchedule) -> torch.Tensor:
    """`w[t_i] * mean((x_hat_i - x_i)^2)` for each sample of a batch."""
    x = torch.as_tensor(x)
    t = torch.as_tensor(t, dtype=torch.long).reshape(-1)
    z_t = noisy_latent(x, epsilon, t, schedule)
    x_hat = backend.predict(z_t, t, e_cond)
    if not torch.all(torch.isfinite(x_hat)):
        raise DivergenceError("backend produced a non-finite prediction")
    _, _, w = schedule.tensors(x.dtype)
    sq = (x_hat - x) ** 2
    return w[t] * sq.reshape(sq.shape[0], -1).mean(dim=1)


def reconstruction_loss(backend, x, e_cond, epsilon, t, schedule: NoiseSchedule) -> torch.Tensor:
    """Scalar weighted x-reconstruction loss.

    Accepts a single sample (`x` of shape `[C, H, W]`, scalar `t`) or a batch
    (`[B, C, H, W]`, `t` of shape `[B]`), in which case the per-sample losses
    are averaged.
    """
    x = torch.as_tensor(x)
    if x.ndim == 3:
        x = x[None]
        epsilon = torch.as_tensor(epsilon)[None]
        e_cond = torch.as_tensor(e_cond)[None]
    loss = per_sample_loss(backend, x, e_cond, epsilon, t, schedule).mean()
    if not torch.isfinite(loss):
        raise DivergenceError("non-finite reconstruction loss")
    return loss


# ---------------------------------------------------------------------------
# DDIM


def ddim_timesteps(n_steps: int, n_infer_steps: int) -> list[int]:
    """Descending, evenly strided timesteps starting at the last one."""
    if not 1 <= n_infer_steps <= n_steps:
        raise ValueError(f"n_infer_steps must be in [1, {n_steps}], got {n_infer_steps}")
    ts = np.round(np.linspace(n_steps - 1, 0, n_infer_steps)).astype(int)
    return [int(t) for t in ts]


def initial_noise(shape: tuple[int, ...], seed: int) -> torch.Tensor:
    gen = torch.Generator().manual_seed(int(seed))
    return torch.randn(shape, generator=gen)


@torch.no_grad()
def ddim_sample_batch(
    backend,
    e_cond: torch.Tensor,
    schedule: NoiseSchedule,
    n_infer_steps: int = 50,
    seeds: list[int] | None = None,
    image_shape: tuple[int, ...] | None = None,
) -> torch.Tensor:
    """Deterministic (eta = 0) DDIM over a batch of conditionings, one seed each."""
    e_cond = torch.as_tensor(e_cond, dtype=torch.float32)
    image_shape = tuple(image_shape or backend.image_shape)
    seeds = list(range(e_cond.shape[0])) if seeds is None else list(seeds)
    if len(seeds) != e_cond.shape[0]:
        raise ValueError("need one seed per conditioning")
    z = torch.stack([initial_noise(image_shape, s) for s in seeds])
    alpha, sigma, _ = schedule.tensors()
    steps = ddim_timesteps(schedule.n_steps, n_infer_steps)
    x_hat = z
    for i, t in enumerate(steps):
        tt = torch.full((z.shape[0],), t, dtype=torch.long)
        x_hat = backend.predict(z, tt, e_cond).clamp(0.0, 1.0)
        if not torch.all(torch.isfinite(x_hat)):
            raise DivergenceError(f"DDIM step {i} (t={t}): non-finite prediction")
        if i + 1 == len(steps):
            break
        eps_hat = (z - alpha[t] * x_hat) / sigma[t]
        t_next = steps[i + 1]
        z = alpha[t_next] * x_hat + sigma[t_next] * eps_hat
        if not torch.all(torch.isfinite(z)):
            raise DivergenceError(f"DDIM step {i} (t={t}): non-finite latent")
    return x_hat


def ddim_sample(backend, e_cond, schedule: NoiseSchedule, n_infer_steps: int = 50, seed: int = 0) -> np.ndarray:
    e = torch.as_tensor(np.asarray(e_cond), dtype=torch.float32)[None]
    return ddim_sample_batch(backend, e, schedule, n_infer_steps, [seed])[0].numpy()


# ---------------------------------------------------------------------------
# Gradient check


@dataclass
class GradCheckResult:
    analytic: np.ndarray
    numeric: np.ndarray
    kind: list[str]

    @property
    def relative_errors(self) -> np.ndarray:
        denom = np.maximum(np.maximum(np.abs(self.analytic), np.abs(self.numeric)), 1e-8)
        return np.abs(self.analytic - self.numeric) / denom

    @property
    def max_relative_error(self) -> float:
        return float(self.relative_errors.max())


def grad_check_details(
    backend,
    x,
    e_cond,
    t: int,
    schedule: NoiseSchedule,
    n_params: int = 24,
    n_cond: int = 24,
    h: float = 1e-3,
    seed: int = 0,
) -> GradCheckResult:
    """Analytic vs central-difference gradients of the loss, in float64."""
    rng = np.random.default_rng(seed)
    model = copy.deepcopy(backend).double()
    if hasattr(model, "train_mode"):
        model.train_mode(True)
    x = torch.as_tensor(np.asarray(x), dtype=torch.float64)
    eps = torch.as_tensor(rng.standard_normal(x.shape), dtype=torch.float64)
    e = torch.as_tensor(np.asarray(e_cond), dtype=torch.float64).clone().requires_grad_(True)
    params = [p for _, p in sorted(model.named_parameters(), key=lambda kv: kv[0])]

    loss = reconstruction_loss(model, x, e, eps, t, schedule)
    grads = torch.autograd.grad(loss, params + [e], allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params + [e], grads)]

    sizes = np.array([p.numel() for p in params])
    flat_idx = rng.choice(sizes.sum(), size=min(n_params, sizes.sum()), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    targets = []
    for fi in flat_idx:
        k = int(np.searchsorted(offsets, fi, side="right") - 1)
        targets.append(("param", params[k], grads[k], int(fi - offsets[k])))
    for ci in rng.choice(e.numel(), size=min(n_cond, e.numel()), replace=False):
        targets.append(("cond", e, grads[-1], int(ci)))

    analytic, numeric, kinds = [], [], []
    with torch.no_grad():
        for kind, tensor, grad, i in targets:
            flat = tensor.view(-1)
            orig = flat[i].item()
            flat[i] = orig + h
            up = reconstruction_loss(model, x, e, eps, t, schedule).item()
            flat[i] = orig - h
            down = reconstruction_loss(model, x, e, eps, t, schedule).item()
            flat[i] = orig
            numeric.append((up - down) / (2 * h))
            analytic.append(grad.reshape(-1)[i].item())
            kinds.append(kind)
    return GradCheckResult(np.array(analytic), np.array(numeric), kinds)


def grad_check(backend, x, e_cond, t: int, schedule: NoiseSchedule, **kwargs) -> float:
    return grad_check_details(backend, x, e_cond, t, schedule, **kwargs).max_relative_error


# ---------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(backend: ToyBackend, directory: str | os.PathLike) -> Path:
    directory = Path(directory)
    names = []
    for name, p in backend.named_tensors():
        save_tensor(directory / "params" / f"{name}.tsr", p.detach())
        names.append({"name": name, "shape": list(p.shape)})
    write_json(directory / "manifest.json", {
        "format_version": FORMAT_VERSION,
        "backend_kind": backend.kind,
        "backend_config": asdict(backend.config),
        "schedule_config": backend.schedule.config,
        "params": names,
        "param_hash": backend.param_hash(),
    })
    return directory


def load_checkpoint(directory: str | os.PathLike) -> ToyBackend:
    directory = Path(directory)
    meta = read_json(directory / "manifest.json")
    check_version(meta, "checkpoint")
    if meta["backend_kind"] != ToyBackend.kind:
        raise ValueError(f"{directory}: unsupported backend kind {meta['backend_kind']!r}")
    backend = ToyBackend(schedule_from_config(meta["schedule_config"]), ToyBackendConfig(**meta["backend_config"]))
    state = {}
    for entry in meta["params"]:
        arr = load_tensor(directory / "params" / f"{entry['name']}.tsr")
        if list(arr.shape) != entry["shape"]:
            raise ValueError(f"{directory}: {entry['name']} has shape {arr.shape}, manifest says {entry['shape']}")
        state[entry["name"]] = torch.from_numpy(arr.copy())
    backend.load_state_dict(state, strict=False)
    missing = {n for n, _ in backend.named_parameters()} - set(state)
    if missing:
        raise ValueError(f"{directory}: checkpoint lacks parameters {sorted(missing)}")
    if backend.param_hash() != meta["param_hash"]:
        raise ValueError(f"{directory}: parameters do not match recorded param_hash")
    return backend
