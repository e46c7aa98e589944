"""Log-mel analysis, pseudo-inverse synthesis and the Griffin-Lim vocoder."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Protocol

import numpy as np
from scipy.signal import get_window

from .dataio import AudioClip, peak_normalize, trim_or_pad
from .errors import ConfigurationError

MAG_FLOOR = 1e-5
LOG_FLOOR = math.log(MAG_FLOOR)


@dataclass(frozen=True)
class MelConfig:
    sample_rate: int = 22050
    n_fft: int = 1024
    hop: int = 256
    mel_bins: int = 64
    fmin: float = 0.0
    fmax: float | None = None
    frames: int = 352
    clip_seconds: float = 4.0
    max_compression: int = 8

    def __post_init__(self):
        if self.frames % self.max_compression or self.mel_bins % self.max_compression:
            raise ConfigurationError(
                f"frames ({self.frames}) and mel_bins ({self.mel_bins}) must be divisible by "
                f"{self.max_compression}"
            )
        if self.hop <= 0 or self.n_fft <= 0 or self.sample_rate <= 0:
            raise ConfigurationError("n_fft, hop and sample_rate must be positive")
        if self.upper_freq > self.sample_rate / 2 or self.fmin >= self.upper_freq:
            raise ConfigurationError(f"bad mel band [{self.fmin}, {self.upper_freq}] Hz")

    @property
    def upper_freq(self) -> float:
        return self.fmax if self.fmax is not None else self.sample_rate / 2

    @property
    def n_freqs(self) -> int:
        return self.n_fft // 2 + 1

    @property
    def clip_samples(self) -> int:
        return int(round(self.clip_seconds * self.sample_rate))

    @property
    def analysis_samples(self) -> int:
        """Waveform length that yields exactly ``frames`` centred STFT frames."""
        return (self.frames - 1) * self.hop

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def natural_frames(seconds: float, sample_rate: int, hop: int) -> int:
    return 1 + int(round(seconds * sample_rate)) // hop


def padded_frames(seconds: float, sample_rate: int, hop: int, multiple: int = 8) -> int:
    n = natural_frames(seconds, sample_rate, hop)
    return -(-n // multiple) * multiple


SMALL_MEL = MelConfig(22050, 1024, 256, 64, 0.0, None, padded_frames(4.0, 22050, 256))
LARGE_MEL = MelConfig(16000, 1024, 160, 64, 0.0, None, padded_frames(4.0, 16000, 160))


@dataclass(frozen=True)
class MelSpectrogram:
    values: np.ndarray  # (frames, mel_bins)
    config: MelConfig

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


def _hz_to_mel(f):
    # Slaney scale: linear below 1 kHz, logarithmic above.
    f = np.asarray(f, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = math.log(6.4) / 27.0
    return np.where(f >= min_log_hz, min_log_mel + np.log(np.maximum(f, min_log_hz) / min_log_hz) / logstep, f / f_sp)


def _mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = math.log(6.4) / 27.0
    return np.where(m >= min_log_mel, min_log_hz * np.exp(logstep * (m - min_log_mel)), f_sp * m)


@lru_cache(maxsize=16)
def mel_filterbank(cfg: MelConfig) -> np.ndarray:
    """Unit-peak triangular filters on the Slaney mel scale, shape (mel_bins, n_freqs)."""
    fft_freqs = np.linspace(0, cfg.sample_rate / 2, cfg.n_freqs)
    mel_pts = np.linspace(_hz_to_mel(cfg.fmin), _hz_to_mel(cfg.upper_freq), cfg.mel_bins + 2)
    hz_pts = _mel_to_hz(mel_pts)
    fdiff = np.diff(hz_pts)
    ramps = hz_pts[:, None] - fft_freqs[None, :]
    lower = -ramps[:-2] / fdiff[:-1, None]
    upper = ramps[2:] / fdiff[1:, None]
    weights = np.maximum(0.0, np.minimum(lower, upper))
    if np.any(weights.max(axis=1) <= 0):
        raise ConfigurationError("mel filterbank has empty channels; use fewer bins or a larger n_fft")
    weights.setflags(write=False)
    return weights


@lru_cache(maxsize=16)
def _filterbank_pinv(cfg: MelConfig) -> np.ndarray:
    out = np.linalg.pinv(mel_filterbank(cfg))
    out.setflags(write=False)
    return out


@lru_cache(maxsize=16)
def _window(n_fft: int) -> np.ndarray:
    return get_window("hann", n_fft, fftbins=True)


def stft(x: np.ndarray, n_fft: int, hop: int) -> np.ndarray:
    """Centred STFT with reflect padding, shape (frames, n_fft // 2 + 1)."""
    pad = n_fft // 2
    mode = "reflect" if len(x) > pad else "constant"
    xp = np.pad(np.asarray(x, dtype=np.float64), pad, mode=mode)
    n_frames = 1 + (len(xp) - n_fft) // hop
    idx = np.arange(n_fft)[None, :] + hop * np.arange(n_frames)[:, None]
    return np.fft.rfft(xp[idx] * _window(n_fft), axis=1)


def istft(spec: np.ndarray, n_fft: int, hop: int, length: int) -> np.ndarray:
    """Windowed overlap-add inverse of :func:`stft`."""
    win = _window(n_fft)
    frames = np.fft.irfft(spec, n=n_fft, axis=1) * win
    n_frames = spec.shape[0]
    total = n_fft + hop * (n_frames - 1)
    out = np.zeros(total)
    norm = np.zeros(total)
    for i in range(n_frames):
        s = i * hop
        out[s : s + n_fft] += frames[i]
        norm[s : s + n_fft] += win**2
    nz = norm > 1e-10
    out[nz] /= norm[nz]
    pad = n_fft // 2
    out = out[pad : pad + length]
    if len(out) < length:
        out = np.pad(out, (0, length - len(out)))
    return out


def _fit_analysis_length(x: np.ndarray, n: int) -> np.ndarray:
    if len(x) >= n:
        return x[:n]
    extra = n - len(x)
    mode = "reflect" if len(x) > 1 and np.any(x) else "constant"
    return np.pad(x, (0, extra), mode=mode)


def magnitude(clip: AudioClip, cfg: MelConfig) -> np.ndarray:
    """Linear STFT magnitude over exactly ``cfg.frames`` frames."""
    if clip.sample_rate != cfg.sample_rate:
        raise ConfigurationError(f"clip rate {clip.sample_rate} Hz does not match mel config rate {cfg.sample_rate} Hz")
    x = _fit_analysis_length(np.asarray(clip.samples, dtype=np.float64), cfg.analysis_samples)
    return np.abs(stft(x, cfg.n_fft, cfg.hop))


def mel_project(mag: np.ndarray, cfg: MelConfig) -> np.ndarray:
    return np.log(mag @ mel_filterbank(cfg).T + MAG_FLOOR)


def mel_forward(clip: AudioClip, cfg: MelConfig) -> MelSpectrogram:
    return MelSpectrogram(mel_project(magnitude(clip, cfg), cfg), cfg)


def mel_inverse(mel: MelSpectrogram) -> np.ndarray:
    """Least-squares linear magnitude, shape (frames, n_fft // 2 + 1)."""
    mel_mag = np.maximum(np.exp(mel.values) - MAG_FLOOR, 0.0)
    return np.maximum(mel_mag @ _filterbank_pinv(mel.config).T, 0.0)


def spectral_convergence(x: np.ndarray, mag: np.ndarray, cfg: MelConfig) -> float:
    est = np.abs(stft(_fit_analysis_length(x, cfg.analysis_samples), cfg.n_fft, cfg.hop))
    denom = np.linalg.norm(mag)
    if denom == 0:
        return float(np.linalg.norm(est))
    return float(np.linalg.norm(est - mag) / denom)


def griffin_lim(mag: np.ndarray, cfg: MelConfig, iters: int = 32, seed: int = 0) -> AudioClip:
    """Phase reconstruction by alternating projections, from a seeded random phase."""
    if iters < 1:
        raise ConfigurationError(f"iters must be >= 1, got {iters}")
    mag = np.asarray(mag, dtype=np.float64)
    if mag.shape != (cfg.frames, cfg.n_freqs):
        raise ConfigurationError(f"magnitude shape {mag.shape} != {(cfg.frames, cfg.n_freqs)}")
    n = cfg.analysis_samples
    rng = np.random.default_rng(seed)
    angles = np.exp(2j * np.pi * rng.random(mag.shape))
    x = istft(mag * angles, cfg.n_fft, cfg.hop, n)
    for _ in range(iters - 1):
        rebuilt = stft(x, cfg.n_fft, cfg.hop)
        angles = rebuilt / np.maximum(np.abs(rebuilt), 1e-12)
        x = istft(mag * angles, cfg.n_fft, cfg.hop, n)
    clip = AudioClip(peak_normalize(x).astype(np.float32), cfg.sample_rate)
    return trim_or_pad(clip, cfg.clip_seconds)


class Vocoder(Protocol):
    def __call__(self, mel: MelSpectrogram) -> AudioClip: ...


@dataclass(frozen=True)
class GriffinLimVocoder:
    iters: int = 32
    seed: int = 0

    def __call__(self, mel: MelSpectrogram) -> AudioClip:
        return griffin_lim(mel_inverse(mel), mel.config, self.iters, self.seed)


# Fixed affine map of log-mels to roughly [-1, 1] for network inputs.
MEL_CENTER = LOG_FLOOR / 2
MEL_SCALE = -LOG_FLOOR / 2


def normalize_mel(values):
    return (values - MEL_CENTER) / MEL_SCALE


def denormalize_mel(values):
    return values * MEL_SCALE + MEL_CENTER
