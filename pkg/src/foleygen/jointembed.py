"""Toy contrastive language-audio model: a mel conv encoder and a bag-of-words
text encoder projecting into one unit-norm embedding space."""

from __future__ import annotations

import re
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .dataio import DEFAULT_LABELS
from .errors import ConfigurationError, InputError, UndefinedSimilarityError
from .specops import MelSpectrogram, normalize_mel
from .torchutil import check_loss, seeded

UNK = "<unk>"
_WORD = re.compile(r"[a-z0-9]+")


def tokenize(text: str) -> list[str]:
    return _WORD.findall(text.lower())


def build_vocabulary(prompts: Sequence[str]) -> tuple[str, ...]:
    words = sorted({w for p in prompts for w in tokenize(p)})
    return (UNK, *words)


@dataclass(frozen=True)
class EmbeddingVector:
    values: np.ndarray
    modality: str  # "audio" | "text"

    @property
    def dim(self) -> int:
        return int(self.values.shape[0])


@dataclass(frozen=True)
class JointEmbedConfig:
    mel_frames: int = 352
    mel_bins: int = 64
    dim: int = 64
    width: int = 16
    text_hidden: int = 64
    temperature: float = 0.07
    vocabulary: tuple[str, ...] = field(default_factory=lambda: build_vocabulary([l.prompt for l in DEFAULT_LABELS]))

    def as_dict(self) -> dict:
        d = asdict(self)
        d["vocabulary"] = list(self.vocabulary)
        return d


TEMPERATURE_RANGE = (1e-3, 1.0)


class AudioEncoder(nn.Module):
    def __init__(self, width: int, dim: int):
        super().__init__()
        self.convs = nn.Sequential(
            nn.Conv2d(1, width, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(width, 2 * width, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(2 * width, 4 * width, 3, stride=2, padding=1),
            nn.SiLU(),
        )
        self.proj = nn.Linear(8 * width, dim)

    def forward(self, mel: torch.Tensor) -> torch.Tensor:
        h = self.convs(normalize_mel(mel).unsqueeze(1))
        pooled = torch.cat([h.mean(dim=(2, 3)), h.amax(dim=(2, 3))], dim=1)
        return self.proj(pooled)


class TextEncoder(nn.Module):
    def __init__(self, vocab_size: int, hidden: int, dim: int):
        super().__init__()
        self.tokens = nn.Embedding(vocab_size, hidden)
        self.mlp = nn.Sequential(nn.Linear(hidden, hidden), nn.SiLU(), nn.Linear(hidden, dim))

    def forward(self, ids: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        emb = self.tokens(ids) * mask.unsqueeze(-1)
        mean = emb.sum(1) / mask.sum(1, keepdim=True).clamp_min(1.0)
        return self.mlp(mean)


class JointEmbedModel(nn.Module):
    def __init__(self, config: JointEmbedConfig = JointEmbedConfig(), seed: int = 0):
        super().__init__()
        self.config = config
        self.word_index = {w: i for i, w in enumerate(config.vocabulary)}
        with seeded(seed):
            self.audio = AudioEncoder(config.width, config.dim)
            self.text = TextEncoder(len(config.vocabulary), config.text_hidden, config.dim)
        self.temperature = nn.Parameter(torch.tensor(float(config.temperature)))

    def token_ids(self, prompts: Sequence[str]) -> tuple[torch.Tensor, torch.Tensor]:
        rows = []
        for p in prompts:
            words = tokenize(p)
            if not words:
                raise InputError(f"prompt {p!r} has no words")
            rows.append([self.word_index.get(w, 0) for w in words])
        width = max(len(r) for r in rows)
        ids = torch.zeros(len(rows), width, dtype=torch.long)
        mask = torch.zeros(len(rows), width)
        for i, r in enumerate(rows):
            ids[i, : len(r)] = torch.tensor(r)
            mask[i, : len(r)] = 1.0
        return ids, mask

    def embed_text(self, prompts: Sequence[str]) -> torch.Tensor:
        ids, mask = self.token_ids(prompts)
        return F.normalize(self.text(ids, mask), dim=-1)

    def embed_audio(self, mels: torch.Tensor) -> torch.Tensor:
        expected = (self.config.mel_frames, self.config.mel_bins)
        if tuple(mels.shape[-2:]) != expected:
            raise ConfigurationError(f"mel shape {tuple(mels.shape[-2:])} != model input {expected}")
        return F.normalize(self.audio(mels), dim=-1)

    def clamped_temperature(self) -> torch.Tensor:
        return self.temperature.clamp(*TEMPERATURE_RANGE)


def encode_text(model: JointEmbedModel, prompt: str) -> EmbeddingVector:
    if not prompt or not prompt.strip():
        raise InputError("prompt must be non-empty")
    with torch.no_grad():
        v = model.embed_text([prompt])[0]
    return EmbeddingVector(v.double().numpy(), "text")


def encode_audio(model: JointEmbedModel, mel: MelSpectrogram | np.ndarray) -> EmbeddingVector:
    return encode_audio_batch(model, [mel])[0]


def encode_audio_batch(
    model: JointEmbedModel, mels: Sequence[MelSpectrogram | np.ndarray], batch_size: int = 64
) -> list[EmbeddingVector]:
    out = []
    with torch.no_grad():
        for i in range(0, len(mels), batch_size):
            chunk = [m.values if isinstance(m, MelSpectrogram) else m for m in mels[i : i + batch_size]]
            x = torch.as_tensor(np.stack(chunk), dtype=torch.float32)
            out.extend(EmbeddingVector(v.double().numpy(), "audio") for v in model.embed_audio(x))
    return out


def cosine_similarity(a: EmbeddingVector | np.ndarray, b: EmbeddingVector | np.ndarray) -> float:
    va = np.asarray(a.values if isinstance(a, EmbeddingVector) else a, dtype=np.float64)
    vb = np.asarray(b.values if isinstance(b, EmbeddingVector) else b, dtype=np.float64)
    if va.shape != vb.shape:
        raise InputError(f"dimension mismatch: {va.shape} vs {vb.shape}")
    na, nb = np.linalg.norm(va), np.linalg.norm(vb)
    if na == 0 or nb == 0:
        raise UndefinedSimilarityError("cosine similarity of a zero vector is undefined")
    return float(np.clip(va @ vb / (na * nb), -1.0, 1.0))


def info_nce(audio: torch.Tensor, text: torch.Tensor, temperature: torch.Tensor | float) -> torch.Tensor:
    """Symmetric cross-entropy over the B x B similarity matrix; row i pairs with column i."""
    if audio.shape[0] < 2:
        raise InputError(f"contrastive loss needs a batch of at least 2, got {audio.shape[0]}")
    logits = audio @ text.T / temperature
    target = torch.arange(audio.shape[0])
    return 0.5 * (F.cross_entropy(logits, target) + F.cross_entropy(logits.T, target))


def contrastive_loss(model: JointEmbedModel, mels: torch.Tensor, prompts: Sequence[str]) -> torch.Tensor:
    if len(prompts) != mels.shape[0]:
        raise InputError("mels and prompts must pair up one to one")
    if len(prompts) < 2:
        raise InputError(f"contrastive loss needs a batch of at least 2, got {len(prompts)}")
    return info_nce(model.embed_audio(mels), model.embed_text(prompts), model.clamped_temperature())


def distinct_text_batches(prompts: Sequence[str], batch_size: int, generator: torch.Generator) -> list[list[int]]:
    """Shuffled batches in which no prompt repeats, so no positive is scored as a negative."""
    groups: dict[str, list[int]] = {}
    for i in torch.randperm(len(prompts), generator=generator).tolist():
        groups.setdefault(prompts[i], []).append(i)
    queues = [groups[k] for k in sorted(groups)]
    out = []
    while any(queues):
        live = [q for q in queues if q]
        order = torch.randperm(len(live), generator=generator).tolist()
        picks = [live[j].pop() for j in order]
        out.extend(picks[i : i + batch_size] for i in range(0, len(picks), batch_size))
    return [b for b in out if len(b) >= 2]


def train_joint_embedding(
    model: JointEmbedModel,
    examples: Sequence[tuple[np.ndarray, str]],
    epochs: int,
    seed: int,
    batch_size: int = 32,
    lr: float = 1e-3,
) -> tuple[JointEmbedModel, list[float]]:
    """Train on (log-mel, prompt) pairs; returns the model and per-epoch mean losses."""
    if not examples:
        raise InputError("training set is empty")
    trace: list[float] = []
    if epochs <= 0:
        return model, trace
    mels = torch.as_tensor(np.stack([m for m, _ in examples]), dtype=torch.float32)
    prompts = [p for _, p in examples]
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    model.train()
    for epoch in range(epochs):
        losses = []
        for step, idx in enumerate(distinct_text_batches(prompts, batch_size, gen)):
            loss = contrastive_loss(model, mels[idx], [prompts[i] for i in idx])
            losses.append(check_loss(loss, "joint embedding", epoch, step))
            opt.zero_grad()
            loss.backward()
            opt.step()
            with torch.no_grad():
                model.temperature.clamp_(*TEMPERATURE_RANGE)
        if not losses:
            raise InputError("need at least two distinct prompts to form a contrastive batch")
        trace.append(float(np.mean(losses)))
    model.eval()
    return model, trace
