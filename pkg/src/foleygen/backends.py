"""Embedding extractors for FAD evaluation."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .dataio import AudioClip, resample
from .errors import ConfigurationError, InputError
from .fadmetric import read_femb
from .jointembed import JointEmbedModel, encode_audio_batch
from .specops import SMALL_MEL, MelConfig, mel_forward


class EmbeddingBackend(Protocol):
    name: str

    def embed(self, clips: Sequence[AudioClip]) -> np.ndarray: ...


def _mels(clips: Sequence[AudioClip], cfg: MelConfig) -> list[np.ndarray]:
    return [mel_forward(resample(c, cfg.sample_rate), cfg).values for c in clips]


@dataclass
class RandomProjectionBackend:
    """Per-bin mean and standard deviation of the log-mel over fixed windows, through a fixed Gaussian projection.

    Each clip yields one embedding per full window (about one second by default), so a class
    of a few clips still gives enough rows for a well-conditioned covariance. A clip shorter
    than one window yields a single embedding of the whole clip.
    """

    dim: int = 32
    seed: int = 0
    mel_config: MelConfig = SMALL_MEL
    window_s: float = 0.96
    name: str = field(default="random_projection", init=False)

    def __post_init__(self):
        if self.window_s <= 0:
            raise ConfigurationError(f"window length must be positive, got {self.window_s}")
        rng = np.random.default_rng(self.seed)
        n_in = 2 * self.mel_config.mel_bins
        self.projection = rng.standard_normal((n_in, self.dim)) / np.sqrt(n_in)

    @property
    def window_frames(self) -> int:
        return max(1, round(self.window_s * self.mel_config.sample_rate / self.mel_config.hop))

    def features(self, mel: np.ndarray) -> np.ndarray:
        return np.concatenate([mel.mean(axis=0), mel.std(axis=0)])

    def windows(self, mel: np.ndarray) -> list[np.ndarray]:
        w = self.window_frames
        if len(mel) < w:
            return [mel]
        return [mel[s : s + w] for s in range(0, len(mel) - w + 1, w)]

    def embed(self, clips: Sequence[AudioClip]) -> np.ndarray:
        if not clips:
            return np.zeros((0, self.dim))
        rows = [self.features(w) for m in _mels(clips, self.mel_config) for w in self.windows(m)]
        return np.stack(rows) @ self.projection


@dataclass
class JointEmbedBackend:
    model: JointEmbedModel
    mel_config: MelConfig
    name: str = field(default="joint_embed", init=False)

    def embed(self, clips: Sequence[AudioClip]) -> np.ndarray:
        if not clips:
            return np.zeros((0, self.model.config.dim))
        return np.stack([e.values for e in encode_audio_batch(self.model, _mels(clips, self.mel_config))])


@dataclass
class ExternalBackend:
    """Precomputed ``<class>.femb`` files, e.g. from a VGGish run elsewhere."""

    directory: Path
    name: str = field(default="external", init=False)

    def load(self, class_name: str) -> np.ndarray:
        path = Path(self.directory) / f"{class_name}.femb"
        if not path.is_file():
            raise InputError(f"missing embedding file {path}")
        return read_femb(path).astype(np.float64)

    def available(self) -> list[str]:
        return sorted(p.stem for p in Path(self.directory).glob("*.femb"))

    def embed(self, clips: Sequence[AudioClip]) -> np.ndarray:
        raise ConfigurationError("the external backend reads embedding files and cannot embed audio")
