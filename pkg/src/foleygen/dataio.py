"""Dataset ingestion: manifests, WAV decoding, length and rate normalization."""

from __future__ import annotations

import csv
import io
import random
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np
from scipy import signal
from scipy.io import wavfile

from .errors import DecodeError, ParseError, ValidationError

# Alphabetical order fixes the ids: keyboard lands on 3.
CLASS_NAMES: tuple[str, ...] = (
    "dog_bark",
    "footstep",
    "gunshot",
    "keyboard",
    "moving_motor_vehicle",
    "rain",
    "sneeze_cough",
)
MOTOR_CLASS = "moving_motor_vehicle"

_PROMPT_OVERRIDES = {
    "keyboard": "someone using keyboard",
    "moving_motor_vehicle": "A moving motor",
}

TASK_CLIP_SECONDS = 4.0
PRETRAIN_CLIP_SECONDS = 10.0


@dataclass(frozen=True)
class ClassLabel:
    id: int
    name: str
    prompt: str

    def __post_init__(self):
        if not self.prompt.strip():
            raise ValidationError(f"class {self.name!r} has an empty prompt")


def default_prompt(name: str) -> str:
    return _PROMPT_OVERRIDES.get(name, f"the sound of {name.replace('_', ' ')}")


def build_labels(
    names: Sequence[str] = CLASS_NAMES,
    prompts: Mapping[str, str] | None = None,
) -> tuple[ClassLabel, ...]:
    """Labels with ids assigned in the order of ``names``."""
    if len(set(names)) != len(names):
        raise ValidationError("class names must be unique")
    prompts = dict(prompts or {})
    unknown = set(prompts) - set(names)
    if unknown:
        raise ValidationError(f"prompts given for unknown classes: {sorted(unknown)}")
    return tuple(
        ClassLabel(i, name, prompts.get(name, default_prompt(name)))
        for i, name in enumerate(names)
    )


DEFAULT_LABELS = build_labels()


def label_by_name(name: str, labels: Sequence[ClassLabel] = DEFAULT_LABELS) -> ClassLabel:
    for label in labels:
        if label.name == name:
            return label
    raise ValidationError(f"unknown class name {name!r}")


@dataclass(frozen=True)
class AudioClip:
    samples: np.ndarray
    sample_rate: int
    label: ClassLabel | None = None
    caption: str | None = None
    source_id: str = ""

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate

    @property
    def text(self) -> str | None:
        """Prompt of the label, else the free-text caption."""
        return self.label.prompt if self.label is not None else self.caption


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    label_id: int | None = None
    caption: str | None = None


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple[ManifestEntry, ...]
    root: Path
    split: str = "train"

    def __len__(self) -> int:
        return len(self.entries)

    def iterate(self, seed: int | None = None) -> Iterator[ManifestEntry]:
        """Manifest order, or a seeded permutation of it."""
        order = list(range(len(self.entries)))
        if seed is not None:
            random.Random(seed).shuffle(order)
        for i in order:
            yield self.entries[i]


def load_manifest(path: str | Path, split: str | None = None, n_classes: int = 7) -> DatasetManifest:
    """Parse a ``path,label`` CSV; paths are relative to the manifest's directory.

    A label that parses as an integer is a class id, anything else is kept as
    a free-text caption.
    """
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    rows = csv.reader(io.StringIO(text))
    try:
        header = next(rows)
    except StopIteration:
        raise ParseError(f"{path}: missing header line") from None
    if [h.strip() for h in header] != ["path", "label"]:
        raise ParseError(f"{path}:1: expected header 'path,label', got {header!r}")

    entries = []
    for lineno, row in enumerate(rows, start=2):
        if not row or all(not cell.strip() for cell in row):
            continue
        if len(row) != 2 or not row[0].strip():
            raise ParseError(f"{path}:{lineno}: expected 2 fields, got {row!r}")
        rel, label = row[0].strip(), row[1].strip()
        if not label:
            raise ParseError(f"{path}:{lineno}: empty label")
        try:
            label_id = int(label)
        except ValueError:
            entries.append(ManifestEntry(rel, caption=label))
            continue
        if not 0 <= label_id < n_classes:
            raise ValidationError(f"{path}:{lineno}: label id {label_id} outside [0, {n_classes - 1}]")
        entries.append(ManifestEntry(rel, label_id=label_id))

    root = path.parent
    for e in entries:
        if not (root / e.path).is_file():
            raise ValidationError(f"{path}: referenced file {e.path!r} does not exist under {root}")
    return DatasetManifest(tuple(entries), root, split or root.name)


def write_manifest(path: str | Path, entries: Sequence[ManifestEntry]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["path", "label"])
        for e in entries:
            writer.writerow([e.path, e.label_id if e.label_id is not None else e.caption])


def read_wav(path: str | Path) -> tuple[np.ndarray, int]:
    """Decode to float32 with shape (samples, channels)."""
    try:
        rate, data = wavfile.read(str(path))
    except (ValueError, OSError, EOFError) as exc:
        raise DecodeError(f"cannot decode {path}: {exc}") from exc
    if data.dtype == np.int16:
        data = data.astype(np.float32) / 32768.0
    elif data.dtype == np.int32:
        data = data.astype(np.float32) / 2147483648.0
    elif data.dtype == np.uint8:
        data = (data.astype(np.float32) - 128.0) / 128.0
    elif data.dtype in (np.float32, np.float64):
        data = data.astype(np.float32)
    else:
        raise DecodeError(f"unsupported sample format {data.dtype} in {path}")
    if data.ndim == 1:
        data = data[:, None]
    if not np.all(np.isfinite(data)):
        raise DecodeError(f"{path} contains non-finite samples")
    return data, int(rate)


def to_pcm16(samples: np.ndarray) -> np.ndarray:
    return np.round(np.clip(samples, -1.0, 1.0) * 32767.0).astype(np.int16)


def write_wav(path: str | Path, clip: AudioClip) -> None:
    """Always written as 16-bit PCM mono."""
    wavfile.write(str(path), clip.sample_rate, to_pcm16(clip.samples))


def peak_normalize(samples: np.ndarray) -> np.ndarray:
    peak = float(np.max(np.abs(samples))) if samples.size else 0.0
    if peak > 1.0:
        return (samples / peak).astype(samples.dtype)
    return samples


def resample(clip: AudioClip, new_rate: int) -> AudioClip:
    """Polyphase (band-limited) rate conversion."""
    if new_rate <= 0:
        raise ValidationError(f"sample rate must be positive, got {new_rate}")
    if new_rate == clip.sample_rate:
        return clip
    ratio = Fraction(new_rate, clip.sample_rate)
    out = signal.resample_poly(clip.samples.astype(np.float64), ratio.numerator, ratio.denominator)
    return replace(clip, samples=out.astype(np.float32), sample_rate=new_rate)


def trim_or_pad(clip: AudioClip, length_s: float) -> AudioClip:
    """Keep the head of long clips; zero-pad short ones at the end."""
    if length_s <= 0:
        raise ValidationError(f"clip length must be positive, got {length_s}")
    n = int(round(length_s * clip.sample_rate))
    x = clip.samples
    if len(x) == n:
        return clip
    if len(x) > n:
        out = x[:n].copy()
    else:
        out = np.zeros(n, dtype=x.dtype)
        out[: len(x)] = x
    return replace(clip, samples=out)


def load_clip(
    manifest: DatasetManifest,
    entry: ManifestEntry,
    target_rate: int,
    labels: Sequence[ClassLabel] = DEFAULT_LABELS,
) -> AudioClip:
    data, rate = read_wav(manifest.root / entry.path)
    mono = data.mean(axis=1) if data.shape[1] > 1 else data[:, 0]
    clip = AudioClip(
        samples=peak_normalize(mono),
        sample_rate=rate,
        label=labels[entry.label_id] if entry.label_id is not None else None,
        caption=entry.caption,
        source_id=entry.path,
    )
    return resample(clip, target_rate)


def load_split(
    manifest: DatasetManifest,
    target_rate: int,
    length_s: float,
    labels: Sequence[ClassLabel] = DEFAULT_LABELS,
    seed: int | None = None,
) -> list[AudioClip]:
    """Every clip of a manifest, normalized to one rate and one length."""
    return [
        trim_or_pad(load_clip(manifest, e, target_rate, labels), length_s)
        for e in manifest.iterate(seed)
    ]


@dataclass
class ClassIndex:
    """Clips grouped by class name, insertion order preserved."""

    by_class: dict[str, list[AudioClip]] = field(default_factory=dict)

    @classmethod
    def from_clips(cls, clips: Sequence[AudioClip]) -> "ClassIndex":
        index = cls()
        for clip in clips:
            if clip.label is not None:
                index.by_class.setdefault(clip.label.name, []).append(clip)
        return index
