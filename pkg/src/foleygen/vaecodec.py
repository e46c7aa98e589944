"""Convolutional VAE between log-mel spectrograms and the diffusion latent space."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigurationError, InputError
from .specops import LOG_FLOOR, MelConfig, MelSpectrogram, denormalize_mel, normalize_mel
from .torchutil import batches, check_loss, seeded


@dataclass(frozen=True)
class LatentTensor:
    """Channels-last latent, shape (frames / c, mel_bins / c, channels)."""

    values: np.ndarray
    compression_level: int

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape


@dataclass(frozen=True)
class VaeConfig:
    mel_frames: int = 352
    mel_bins: int = 64
    compression_level: int = 4
    channels: int = 4
    width: int = 16
    kl_weight: float = 1e-2

    def __post_init__(self):
        c = self.compression_level
        if c < 2 or c & (c - 1):
            raise ConfigurationError(f"compression level must be a power of two >= 2, got {c}")

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        c = self.compression_level
        return (self.mel_frames // c, self.mel_bins // c, self.channels)

    def as_dict(self) -> dict:
        return asdict(self)


def _check_divisible(frames: int, bins: int, c: int) -> None:
    if frames % c or bins % c:
        raise ConfigurationError(f"mel shape {frames}x{bins} is not divisible by compression level {c}")


class VaeModel(nn.Module):
    def __init__(self, config: VaeConfig = VaeConfig(), seed: int = 0):
        super().__init__()
        _check_divisible(config.mel_frames, config.mel_bins, config.compression_level)
        self.config = config
        levels = int(math.log2(config.compression_level))
        w = config.width
        widths = [w * 2**min(i, 2) for i in range(levels + 1)]
        with seeded(seed):
            enc: list[nn.Module] = [nn.Conv2d(1, widths[0], 3, padding=1), nn.SiLU()]
            for i in range(levels):
                enc += [nn.Conv2d(widths[i], widths[i + 1], 4, stride=2, padding=1), nn.SiLU()]
            enc.append(nn.Conv2d(widths[-1], 2 * config.channels, 3, padding=1))
            self.encoder = nn.Sequential(*enc)

            dec: list[nn.Module] = [nn.Conv2d(config.channels, widths[-1], 3, padding=1), nn.SiLU()]
            for i in reversed(range(levels)):
                dec += [nn.ConvTranspose2d(widths[i + 1], widths[i], 4, stride=2, padding=1), nn.SiLU()]
            dec.append(nn.Conv2d(widths[0], 1, 3, padding=1))
            self.decoder = nn.Sequential(*dec)

    def encode(self, mels: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(B, T, F) log-mels -> mean, log-variance each (B, C, T/c, F/c)."""
        _check_divisible(mels.shape[-2], mels.shape[-1], self.config.compression_level)
        if tuple(mels.shape[-2:]) != (self.config.mel_frames, self.config.mel_bins):
            raise ConfigurationError(
                f"mel shape {tuple(mels.shape[-2:])} != {(self.config.mel_frames, self.config.mel_bins)}"
            )
        h = self.encoder(normalize_mel(mels).unsqueeze(1))
        mean, logvar = h.chunk(2, dim=1)
        return mean, logvar.clamp(-30.0, 20.0)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        """(B, C, T/c, F/c) -> (B, T, F) log-mels, floored."""
        expected = self.channels_first_shape
        if tuple(z.shape[1:]) != expected:
            raise ConfigurationError(f"latent shape {tuple(z.shape[1:])} != {expected}")
        out = denormalize_mel(self.decoder(z).squeeze(1))
        return out.clamp_min(LOG_FLOOR)

    @property
    def channels_first_shape(self) -> tuple[int, int, int]:
        t, f, c = self.config.latent_shape
        return (c, t, f)


def to_channels_last(z: torch.Tensor) -> np.ndarray:
    return z.detach().permute(1, 2, 0).double().numpy()


def to_channels_first(values: np.ndarray) -> torch.Tensor:
    return torch.as_tensor(np.asarray(values), dtype=torch.float32).permute(2, 0, 1)


def vae_encode(model: VaeModel, mel: MelSpectrogram | np.ndarray) -> tuple[LatentTensor, LatentTensor]:
    values = mel.values if isinstance(mel, MelSpectrogram) else np.asarray(mel)
    with torch.no_grad():
        mean, logvar = model.encode(torch.as_tensor(values, dtype=torch.float32)[None])
    c = model.config.compression_level
    return LatentTensor(to_channels_last(mean[0]), c), LatentTensor(to_channels_last(logvar[0]), c)


def reparameterize(mean: LatentTensor, log_variance: LatentTensor, seed: int) -> LatentTensor:
    if mean.shape != log_variance.shape:
        raise InputError(f"mean shape {mean.shape} != log-variance shape {log_variance.shape}")
    eps = np.random.default_rng(seed).standard_normal(mean.shape)
    return LatentTensor(mean.values + np.exp(0.5 * log_variance.values) * eps, mean.compression_level)


def vae_decode(model: VaeModel, z: LatentTensor, mel_config: MelConfig | None = None) -> MelSpectrogram:
    with torch.no_grad():
        out = model.decode(to_channels_first(z.values)[None])[0]
    cfg = mel_config or MelConfig(
        frames=model.config.mel_frames, mel_bins=model.config.mel_bins, max_compression=model.config.compression_level
    )
    return MelSpectrogram(out.double().numpy(), cfg)


def kl_divergence(mean: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """KL(q || N(0, I)) averaged over latent elements."""
    return 0.5 * (mean.pow(2) + logvar.exp() - logvar - 1.0).mean()


def elbo_terms(model: VaeModel, mels: torch.Tensor, sample: bool = True, generator: torch.Generator | None = None):
    mean, logvar = model.encode(mels)
    if sample:
        eps = torch.randn(mean.shape, generator=generator)
        z = mean + torch.exp(0.5 * logvar) * eps
    else:
        z = mean
    recon = F.mse_loss(model.decode(z), mels)
    kl = kl_divergence(mean, logvar)
    return recon + model.config.kl_weight * kl, recon, kl


def elbo_loss(model: VaeModel, mel: MelSpectrogram | np.ndarray, seed: int = 0) -> tuple[float, float, float]:
    values = mel.values if isinstance(mel, MelSpectrogram) else np.asarray(mel)
    with torch.no_grad():
        total, recon, kl = elbo_terms(
            model, torch.as_tensor(values, dtype=torch.float32)[None], generator=torch.Generator().manual_seed(seed)
        )
    return float(total), float(recon), float(kl)


def reconstruction_error(model: VaeModel, mels: np.ndarray) -> float:
    """Relative Frobenius error of decode(encode-mean) over a stack of mels."""
    x = torch.as_tensor(np.asarray(mels), dtype=torch.float32)
    with torch.no_grad():
        mean, _ = model.encode(x)
        rec = model.decode(mean)
    return float(torch.linalg.vector_norm(rec - x) / torch.linalg.vector_norm(x))


def train_vae(
    model: VaeModel,
    mels: Sequence[np.ndarray] | np.ndarray,
    epochs: int,
    seed: int,
    batch_size: int = 16,
    lr: float = 2e-3,
) -> tuple[VaeModel, list[dict[str, float]]]:
    """Returns the model and per-epoch mean ``total``/``recon``/``kl``."""
    if len(mels) == 0:
        raise InputError("training set is empty")
    trace: list[dict[str, float]] = []
    if epochs <= 0:
        return model, trace
    data = torch.as_tensor(np.stack(list(mels)), dtype=torch.float32)
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    model.train()
    for epoch in range(epochs):
        sums = {"total": 0.0, "recon": 0.0, "kl": 0.0}
        steps = 0
        for step, idx in enumerate(batches(len(data), batch_size, gen)):
            total, recon, kl = elbo_terms(model, data[idx], generator=gen)
            sums["total"] += check_loss(total, "vae", epoch, step)
            sums["recon"] += float(recon.detach())
            sums["kl"] += float(kl.detach())
            steps += 1
            opt.zero_grad()
            total.backward()
            opt.step()
        trace.append({k: v / steps for k, v in sums.items()})
    model.eval()
    return model, trace


def encode_means(model: VaeModel, mels: np.ndarray, batch_size: int = 64) -> torch.Tensor:
    """Channels-first posterior means for a stack of mels."""
    out = []
    with torch.no_grad():
        for i in range(0, len(mels), batch_size):
            mean, _ = model.encode(torch.as_tensor(np.asarray(mels[i : i + batch_size]), dtype=torch.float32))
            out.append(mean)
    return torch.cat(out)


def decode_batch(model: VaeModel, z: torch.Tensor, batch_size: int = 64) -> np.ndarray:
    out = []
    with torch.no_grad():
        for i in range(0, len(z), batch_size):
            out.append(model.decode(z[i : i + batch_size]))
    return torch.cat(out).double().numpy()
