"""Synthetic Foley-like corpora: one procedural texture family per class."""

from __future__ import annotations

from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import signal

from .dataio import CLASS_NAMES, DEFAULT_LABELS, AudioClip, ClassLabel, ManifestEntry, write_manifest, write_wav


def _filtered_noise(rng, n, sr, kind, freq):
    sos = signal.butter(4, freq, btype=kind, fs=sr, output="sos")
    return signal.sosfilt(sos, rng.standard_normal(n))


def _place(out, burst, start):
    end = min(len(out), start + len(burst))
    if end > start:
        out[start:end] += burst[: end - start]


def _dog_bark(rng, n, sr):
    out = np.zeros(n)
    f0 = rng.uniform(400, 650)
    for _ in range(rng.integers(2, 5)):
        m = int(rng.uniform(0.12, 0.2) * sr)
        t = np.arange(m) / sr
        glide = f0 * (1 + 0.3 * np.exp(-t / 0.05))
        phase = 2 * np.pi * np.cumsum(glide) / sr
        tone = sum(np.sin(k * phase) / k for k in range(1, 5))
        _place(out, tone * np.hanning(m), int(rng.uniform(0, 0.9) * n))
    return out


def _footstep(rng, n, sr):
    out = np.zeros(n)
    period = rng.uniform(0.45, 0.6) * sr
    t0 = rng.uniform(0, period)
    while t0 < n:
        m = int(0.06 * sr)
        thump = _filtered_noise(rng, m, sr, "lowpass", 300) * np.exp(-np.arange(m) / (0.012 * sr))
        _place(out, thump * 4, int(t0))
        t0 += period * rng.uniform(0.95, 1.05)
    return out


def _gunshot(rng, n, sr):
    out = np.zeros(n)
    for _ in range(rng.integers(1, 3)):
        m = int(0.8 * sr)
        burst = rng.standard_normal(m) * np.exp(-np.arange(m) / (rng.uniform(0.05, 0.12) * sr))
        _place(out, burst, int(rng.uniform(0, 0.6) * n))
    return out


def _keyboard(rng, n, sr):
    out = np.zeros(n)
    rate = rng.uniform(8, 14)
    t0 = 0.0
    while True:
        t0 += rng.exponential(sr / rate)
        if t0 >= n:
            break
        m = int(0.008 * sr)
        click = _filtered_noise(rng, m, sr, "highpass", min(3000, sr / 2 - 500)) * np.exp(-np.arange(m) / (0.002 * sr))
        _place(out, click * 3, int(t0))
    return out


def _motor(rng, n, sr):
    t = np.arange(n) / sr
    f0 = rng.uniform(45, 85) * (1 + 0.05 * np.sin(2 * np.pi * rng.uniform(0.1, 0.4) * t))
    phase = 2 * np.pi * np.cumsum(f0) / sr
    drone = sum(np.sin(k * phase) / k**0.7 for k in range(1, 12))
    return drone * (0.8 + 0.2 * np.sin(2 * np.pi * 6 * t)) + 0.5 * _filtered_noise(rng, n, sr, "lowpass", 500)


def _rain(rng, n, sr):
    out = _filtered_noise(rng, n, sr, "highpass", 1500) * rng.uniform(0.4, 0.7)
    for _ in range(int(rng.uniform(30, 60) * n / sr)):
        m = int(0.004 * sr)
        _place(out, rng.standard_normal(m) * np.hanning(m) * 1.5, int(rng.uniform(0, n)))
    return out


def _sneeze_cough(rng, n, sr):
    out = np.zeros(n)
    for _ in range(rng.integers(1, 3)):
        m = int(rng.uniform(0.25, 0.4) * sr)
        env = np.exp(-np.arange(m) / (0.1 * sr)) * (1 - np.exp(-np.arange(m) / (0.01 * sr)))
        lo, hi = 500, min(2500, sr / 2 - 100)
        _place(out, _filtered_noise(rng, m, sr, "bandpass", [lo, hi]) * env * 3, int(rng.uniform(0, 0.8) * n))
    return out


GENERATORS: dict[str, Callable] = {
    "dog_bark": _dog_bark,
    "footstep": _footstep,
    "gunshot": _gunshot,
    "keyboard": _keyboard,
    "moving_motor_vehicle": _motor,
    "rain": _rain,
    "sneeze_cough": _sneeze_cough,
}


def synth_clip(class_name: str, seconds: float, sample_rate: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    n = int(round(seconds * sample_rate))
    x = GENERATORS[class_name](rng, n, sample_rate)
    peak = np.max(np.abs(x))
    if peak > 0:
        x = x / peak * rng.uniform(0.5, 0.9)
    return x.astype(np.float32)


def write_corpus(
    directory: str | Path,
    per_class: int,
    seconds: float,
    sample_rate: int,
    seed: int,
    labels: Sequence[ClassLabel] = DEFAULT_LABELS,
    captions: bool = False,
) -> Path:
    """Write WAVs plus ``manifest.csv``; returns the manifest path.

    With ``captions`` the label column holds free text instead of class ids.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for label in labels:
        if label.name not in GENERATORS:
            raise ValueError(f"no synthetic generator for class {label.name!r}")
        for i in range(per_class):
            clip_seed = seed * 1_000_003 + label.id * 10_007 + i
            samples = synth_clip(label.name, seconds, sample_rate, clip_seed)
            rel = f"{label.name}_{i:03d}.wav"
            write_wav(directory / rel, AudioClip(samples, sample_rate))
            if captions:
                entries.append(ManifestEntry(rel, caption=f"recording of {label.name.replace('_', ' ')}"))
            else:
                entries.append(ManifestEntry(rel, label_id=label.id))
    path = directory / "manifest.csv"
    write_manifest(path, entries)
    return path


__all__ = ["CLASS_NAMES", "GENERATORS", "synth_clip", "write_corpus"]
