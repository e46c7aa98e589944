"""Latent diffusion: noise schedule, conditioned U-Net denoiser, noise-prediction
training with audio or text conditioning, and the strided sampler."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigurationError, InputError, TrainingError
from .jointembed import EmbeddingVector, JointEmbedModel
from .torchutil import batches, check_loss, seeded, state_checksum
from .vaecodec import LatentTensor, VaeModel, encode_means

EpsModel = Callable[[torch.Tensor, torch.Tensor, torch.Tensor], torch.Tensor]


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def n_steps(self) -> int:
        return len(self.betas)

    def alpha_bar(self, n):
        """Cumulative product at 1-based step ``n``; step 0 is the clean signal."""
        table = np.concatenate([[1.0], self.alpha_bars])
        return table[n]

    def as_dict(self) -> dict:
        return {"n": self.n_steps, "beta_start": float(self.betas[0]), "beta_end": float(self.betas[-1])}


def build_schedule(n_steps: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear betas from ``beta_start`` to ``beta_end``."""
    if n_steps < 1:
        raise ConfigurationError(f"schedule needs at least one step, got {n_steps}")
    if not 0 < beta_start <= beta_end < 1:
        raise ConfigurationError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.linspace(beta_start, beta_end, n_steps, dtype=np.float64)
    alphas = 1.0 - betas
    return NoiseSchedule(betas, alphas, np.cumprod(alphas))


def _check_step(n, schedule: NoiseSchedule) -> None:
    arr = np.asarray(n.detach().cpu() if isinstance(n, torch.Tensor) else n)
    if arr.size and (arr.min() < 1 or arr.max() > schedule.n_steps):
        raise InputError(f"diffusion step must lie in [1, {schedule.n_steps}], got {arr.min()}..{arr.max()}")


def q_sample(z0, n, eps, schedule: NoiseSchedule):
    """Closed-form forward marginal; ``n`` is an int or a per-item tensor of steps."""
    _check_step(n, schedule)
    if isinstance(z0, torch.Tensor):
        ab = torch.as_tensor(schedule.alpha_bar(np.asarray(n.cpu() if isinstance(n, torch.Tensor) else n)), dtype=z0.dtype)
        ab = ab.reshape(-1, *([1] * (z0.dim() - 1))) if ab.dim() else ab
        return ab.sqrt() * z0 + (1 - ab).sqrt() * eps
    if np.shape(eps) != np.shape(z0):
        raise InputError(f"noise shape {np.shape(eps)} != latent shape {np.shape(z0)}")
    ab = schedule.alpha_bar(n)
    return math.sqrt(ab) * np.asarray(z0) + math.sqrt(1 - ab) * np.asarray(eps)


def q_step(z_prev, n: int, eps, schedule: NoiseSchedule):
    """Single forward transition z_{n-1} -> z_n."""
    beta = schedule.betas[n - 1]
    return math.sqrt(1 - beta) * z_prev + math.sqrt(beta) * eps


@dataclass(frozen=True)
class DenoiserConfig:
    latent_channels: int = 4
    latent_frames: int = 88
    latent_bins: int = 16
    cond_dim: int = 64
    width: int = 32
    channel_mults: tuple[int, ...] = (1, 2, 4)
    compression_level: int = 4

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        return (self.latent_channels, self.latent_frames, self.latent_bins)

    def as_dict(self) -> dict:
        d = asdict(self)
        d["channel_mults"] = list(self.channel_mults)
        return d


def timestep_embedding(n: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = n.double()[:, None] * freqs[None]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


def _norm(ch: int) -> nn.GroupNorm:
    return nn.GroupNorm(math.gcd(8, ch), ch)


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, emb_dim: int):
        super().__init__()
        self.norm1 = _norm(cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.emb = nn.Linear(emb_dim, cout)
        self.norm2 = _norm(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb(emb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class DenoiserModel(nn.Module):
    """U-Net predicting the added noise; the condition is projected and added to the step embedding.

    With a ``schedule`` the network output is added to sqrt(1 - alpha_bar_n) * z_n, the best
    linear noise estimate for unit-variance latents, so the U-Net only learns the residual.
    Without that skip, noise estimates near the last step must be accurate to about
    sqrt(alpha_bar_N) for the implied clean latent to stay bounded.
    """

    def __init__(self, config: DenoiserConfig = DenoiserConfig(), seed: int = 0, schedule: NoiseSchedule | None = None):
        super().__init__()
        self.config = config
        w = config.width
        emb_dim = 4 * w
        chans = [w * m for m in config.channel_mults]
        with seeded(seed):
            self.time_mlp = nn.Sequential(nn.Linear(w, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim))
            self.cond_proj = nn.Linear(config.cond_dim, emb_dim)
            self.inp = nn.Conv2d(config.latent_channels, w, 3, padding=1)
            self.down = nn.ModuleList()
            self.downsample = nn.ModuleList()
            prev = w
            for i, ch in enumerate(chans):
                self.down.append(ResBlock(prev, ch, emb_dim))
                prev = ch
                if i < len(chans) - 1:
                    self.downsample.append(nn.Conv2d(ch, ch, 3, stride=2, padding=1))
            self.mid = ResBlock(prev, prev, emb_dim)
            self.up = nn.ModuleList()
            self.upconv = nn.ModuleList()
            for ch in reversed(chans[:-1]):
                self.upconv.append(nn.Conv2d(prev, prev, 3, padding=1))
                self.up.append(ResBlock(prev + ch, ch, emb_dim))
                prev = ch
            self.out_norm = _norm(prev)
            self.out = nn.Conv2d(prev, config.latent_channels, 3, padding=1)
        self.register_buffer("latent_scale", torch.tensor(1.0))
        self.register_buffer("latent_shift", torch.zeros(config.latent_channels, 1, 1))
        if schedule is not None:
            gain = np.sqrt(1.0 - np.concatenate([[1.0], schedule.alpha_bars]))
            self.register_buffer("skip_gain", torch.as_tensor(gain, dtype=torch.float32))
        else:
            self.skip_gain = None

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        return self.config.latent_shape

    def normalize(self, latents: torch.Tensor) -> torch.Tensor:
        """VAE latents (B, C, T, F) to the centred, unit-variance space the denoiser works in."""
        return (latents - self.latent_shift.to(latents.dtype)) * self.latent_scale.to(latents.dtype)

    def denormalize(self, x: torch.Tensor) -> torch.Tensor:
        return x / self.latent_scale.to(x.dtype) + self.latent_shift.to(x.dtype)

    def forward(self, z: torch.Tensor, n: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        if cond.shape[-1] != self.config.cond_dim:
            raise ConfigurationError(f"condition dimension {cond.shape[-1]} != {self.config.cond_dim}")
        emb = self.time_mlp(timestep_embedding(n, self.config.width).to(z.dtype)) + self.cond_proj(cond)
        emb = F.silu(emb)
        h = self.inp(z)
        skips = []
        for i, block in enumerate(self.down):
            h = block(h, emb)
            if i < len(self.downsample):
                skips.append(h)
                h = self.downsample[i](h)
        h = self.mid(h, emb)
        for conv, block in zip(self.upconv, self.up):
            skip = skips.pop()
            h = conv(F.interpolate(h, size=skip.shape[-2:], mode="nearest"))
            h = block(torch.cat([h, skip], dim=1), emb)
        out = self.out(F.silu(self.out_norm(h)))
        if self.skip_gain is not None:
            out = out + self.skip_gain.to(z.dtype)[n].reshape(-1, 1, 1, 1) * z
        return out


def denoise_loss(model: EpsModel, z0: torch.Tensor, n, eps: torch.Tensor, condition, schedule: NoiseSchedule) -> torch.Tensor:
    """Mean squared error between the drawn noise and the model's prediction at z_n."""
    cond = condition.values if isinstance(condition, EmbeddingVector) else condition
    cond = torch.as_tensor(cond, dtype=z0.dtype)
    if cond.dim() == 1:
        cond = cond.expand(z0.shape[0], -1)
    expected = getattr(getattr(model, "config", None), "cond_dim", None)
    if expected is not None and cond.shape[-1] != expected:
        raise ConfigurationError(f"condition dimension {cond.shape[-1]} != {expected}")
    if isinstance(n, int):
        n = torch.full((z0.shape[0],), n, dtype=torch.long)
    zn = q_sample(z0, n, eps, schedule)
    return F.mse_loss(model(zn, n, cond), eps)


def fit_denoiser(
    model: DenoiserModel,
    latents: torch.Tensor,
    conditions: torch.Tensor,
    schedule: NoiseSchedule,
    epochs: int,
    seed: int,
    batch_size: int = 16,
    lr: float = 1e-3,
    label: str = "ldm",
) -> list[float]:
    """Noise-prediction training on already-scaled latents; returns per-epoch mean loss."""
    trace: list[float] = []
    if epochs <= 0:
        return trace
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.AdamW(model.parameters(), lr=lr, weight_decay=0.0)
    model.train()
    for epoch in range(epochs):
        losses = []
        for step, idx in enumerate(batches(len(latents), batch_size, gen)):
            z0 = latents[idx]
            n = torch.randint(1, schedule.n_steps + 1, (len(idx),), generator=gen)
            eps = torch.randn(z0.shape, generator=gen, dtype=z0.dtype)
            loss = denoise_loss(model, z0, n, eps, conditions[idx], schedule)
            losses.append(check_loss(loss, label, epoch, step))
            opt.zero_grad()
            loss.backward()
            opt.step()
        trace.append(float(np.mean(losses)))
    model.eval()
    return trace


def conditioning_vectors(
    mode: str, clap: JointEmbedModel, mels: np.ndarray, prompts: Sequence[str | None] | None
) -> torch.Tensor:
    """Audio embeddings of the clips (pretrain) or text embeddings of their prompts (finetune)."""
    with torch.no_grad():
        if mode == "pretrain":
            x = torch.as_tensor(np.asarray(mels), dtype=torch.float32)
            return torch.cat([clap.embed_audio(x[i : i + 64]) for i in range(0, len(x), 64)])
        if mode == "finetune":
            if prompts is None or len(prompts) != len(mels) or any(not p for p in prompts):
                raise InputError("finetuning needs a non-empty prompt for every clip")
            cache = {p: clap.embed_text([p])[0] for p in sorted(set(prompts))}
            return torch.stack([cache[p] for p in prompts])
    raise ConfigurationError(f"unknown training mode {mode!r}; expected 'pretrain' or 'finetune'")


def train_ldm(
    model: DenoiserModel,
    mode: str,
    mels: np.ndarray,
    prompts: Sequence[str | None] | None,
    vae: VaeModel,
    clap: JointEmbedModel,
    schedule: NoiseSchedule,
    epochs: int,
    seed: int,
    batch_size: int = 16,
    lr: float = 1e-3,
    calibrate_scale: bool | None = None,
) -> tuple[DenoiserModel, list[float]]:
    """Train the denoiser on VAE posterior means with frozen VAE and joint-embedding models.

    ``calibrate_scale`` (default: on for pretraining) sets the per-channel shift and the
    scale so the training latents are centred with unit standard deviation.
    """
    if len(mels) == 0:
        raise InputError("training set is empty")
    frozen_before = (state_checksum(vae), state_checksum(clap))
    conds = conditioning_vectors(mode, clap, mels, prompts)
    latents = encode_means(vae, np.asarray(mels))
    if tuple(latents.shape[1:]) != model.latent_shape:
        raise ConfigurationError(f"VAE latent shape {tuple(latents.shape[1:])} != denoiser shape {model.latent_shape}")
    if calibrate_scale if calibrate_scale is not None else mode == "pretrain":
        shift = latents.mean(dim=(0, 2, 3), keepdim=True)[0]
        std = float((latents - shift).std())
        model.latent_shift.copy_(shift)
        model.latent_scale.fill_(1.0 / std if std > 0 else 1.0)
    trace = fit_denoiser(
        model, model.normalize(latents), conds, schedule, epochs, seed, batch_size, lr, label=f"ldm {mode}"
    )
    if (state_checksum(vae), state_checksum(clap)) != frozen_before:
        raise TrainingError("frozen VAE / joint-embedding parameters changed during diffusion training")
    return model, trace


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 200
    eta: float = 0.0

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigurationError(f"sampler steps must be >= 1, got {self.steps}")
        if not 0.0 <= self.eta <= 1.0:
            raise ConfigurationError(f"eta must lie in [0, 1], got {self.eta}")


def sampling_steps(n_steps: int, steps: int) -> list[int]:
    """Uniformly strided steps, descending: every 5th of 1000 for 200 steps."""
    if steps > n_steps:
        raise ConfigurationError(f"sampler steps {steps} exceed schedule length {n_steps}")
    return [math.ceil(i * n_steps / steps) for i in range(steps, 0, -1)]


def ddim_sample(
    eps_model: EpsModel,
    cond: torch.Tensor,
    shape: Sequence[int],
    sampler: SamplerConfig,
    schedule: NoiseSchedule,
    generator: torch.Generator,
    dtype: torch.dtype = torch.float32,
) -> torch.Tensor:
    """Generalized DDIM; eta=0 is deterministic, eta=1 with all steps is ancestral DDPM."""
    steps = sampling_steps(schedule.n_steps, sampler.steps)
    x = torch.randn((cond.shape[0], *shape), generator=generator, dtype=dtype)
    cond = cond.to(dtype)
    for i, n in enumerate(steps):
        prev = steps[i + 1] if i + 1 < len(steps) else 0
        ab, ab_prev = float(schedule.alpha_bar(n)), float(schedule.alpha_bar(prev))
        with torch.no_grad():
            eps = eps_model(x, torch.full((x.shape[0],), n, dtype=torch.long), cond)
        x0 = (x - math.sqrt(1 - ab) * eps) / math.sqrt(ab)
        sigma = sampler.eta * math.sqrt((1 - ab_prev) / (1 - ab) * (1 - ab / ab_prev))
        x = math.sqrt(ab_prev) * x0 + math.sqrt(max(1 - ab_prev - sigma**2, 0.0)) * eps
        if sigma > 0:
            x = x + sigma * torch.randn(x.shape, generator=generator, dtype=dtype)
    return x


def sample_latents(
    model: DenoiserModel,
    condition: EmbeddingVector | np.ndarray,
    sampler: SamplerConfig,
    schedule: NoiseSchedule,
    seed: int,
    count: int,
    eps_model: EpsModel | None = None,
) -> list[LatentTensor]:
    """Draw ``count`` latents for one condition; ``eps_model`` overrides the network call."""
    cond = condition.values if isinstance(condition, EmbeddingVector) else condition
    cond = torch.as_tensor(np.asarray(cond), dtype=torch.float32).expand(count, -1)
    gen = torch.Generator().manual_seed(seed)
    z = ddim_sample(eps_model or model, cond, model.latent_shape, sampler, schedule, gen)
    z = model.denormalize(z)
    c = model.config.compression_level
    return [LatentTensor(item.permute(1, 2, 0).double().numpy(), c) for item in z]
