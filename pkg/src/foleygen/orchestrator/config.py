"""Run configuration: a single YAML file, strictly validated."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

from ..dataio import CLASS_NAMES, MOTOR_CLASS, ClassLabel, build_labels
from ..errors import ConfigurationError
from ..jointembed import JointEmbedConfig, build_vocabulary
from ..latentdiff import DenoiserConfig, SamplerConfig, build_schedule
from ..specops import MelConfig, padded_frames
from ..vaecodec import VaeConfig

SMALL_CLASSES = ("dog_bark", "footstep", "gunshot", "keyboard", "sneeze_cough")
LARGE_CLASSES = ("moving_motor_vehicle", "rain")
OUTPUT_RATE = 22050


@dataclass(frozen=True)
class ModelProfile:
    name: str
    sample_rate: int
    compression_level: int
    denoiser_width: int
    embed_width: int
    upsample_to: int | None = None
    n_fft: int = 1024
    hop: int = 256
    mel_bins: int = 64
    frames: int | None = None
    latent_channels: int = 4
    vae_width: int = 16
    embed_dim: int = 64
    kl_weight: float = 1e-2

    def mel_config(self, clip_seconds: float) -> MelConfig:
        frames = self.frames or padded_frames(clip_seconds, self.sample_rate, self.hop, 8)
        return MelConfig(
            self.sample_rate, self.n_fft, self.hop, self.mel_bins, 0.0, None, frames, clip_seconds,
            max(8, self.compression_level),
        )

    def joint_config(self, clip_seconds: float, prompts) -> JointEmbedConfig:
        mel = self.mel_config(clip_seconds)
        return JointEmbedConfig(mel.frames, mel.mel_bins, self.embed_dim, self.embed_width,
                                vocabulary=build_vocabulary(prompts))

    def vae_config(self, clip_seconds: float) -> VaeConfig:
        mel = self.mel_config(clip_seconds)
        return VaeConfig(mel.frames, mel.mel_bins, self.compression_level, self.latent_channels,
                         self.vae_width, self.kl_weight)

    def denoiser_config(self, clip_seconds: float) -> DenoiserConfig:
        t, f, c = self.vae_config(clip_seconds).latent_shape
        return DenoiserConfig(c, t, f, self.embed_dim, self.denoiser_width, compression_level=self.compression_level)

    @property
    def output_rate(self) -> int:
        return self.upsample_to or self.sample_rate


SMALL_PROFILE = ModelProfile("small", 22050, 4, denoiser_width=32, embed_width=16, hop=256)
LARGE_PROFILE = ModelProfile("large", 16000, 8, denoiser_width=64, embed_width=32, upsample_to=OUTPUT_RATE, hop=160)


@dataclass
class DataSection:
    train_manifest: str = ""
    pretrain_manifest: str | None = None
    reference_manifest: str | None = None
    clip_seconds: float = 4.0
    pretrain_clip_seconds: float = 10.0


@dataclass
class ScheduleSection:
    n: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02


@dataclass
class SamplerSection:
    steps: int = 200
    eta: float = 0.0


@dataclass
class FilterSection:
    enabled: bool = True
    thresholds: dict[str, float] = field(default_factory=dict)
    percentile: float = 25.0
    reference_k: int = 10
    max_resample_rounds: int = 5
    candidates_per_round: int | None = None
    modes: dict[str, str] = field(default_factory=lambda: {MOTOR_CLASS: "audio_reference"})
    conjunctive_prompts: dict[str, list[str]] = field(default_factory=dict)


@dataclass
class TrainingSection:
    clap_epochs: int = 10
    vae_epochs: int = 10
    pretrain_epochs: int = 20
    finetune_epochs: int = 30
    clap_batch_size: int = 32
    vae_batch_size: int = 16
    ldm_batch_size: int = 16
    clap_lr: float = 1e-3
    vae_lr: float = 2e-3
    ldm_lr: float = 1e-3


@dataclass
class GenerateSection:
    count: int = 4
    classes: list[str] = field(default_factory=list)


@dataclass
class VocoderSection:
    iters: int = 32


@dataclass
class EvaluateSection:
    backend: str = "random_projection"
    dim: int = 32
    projection_seed: int = 0
    window_seconds: float = 0.96
    generated_embeddings: str | None = None
    reference_embeddings: str | None = None


@dataclass
class RunConfig:
    output_dir: str = "runs/default"
    seed: int = 0
    class_order: list[str] = field(default_factory=list)
    data: DataSection = field(default_factory=DataSection)
    prompts: dict[str, str] = field(default_factory=dict)
    routing: dict[str, str] = field(default_factory=dict)
    profiles: dict[str, dict[str, Any]] = field(default_factory=dict)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    sampler: SamplerSection = field(default_factory=SamplerSection)
    filter: FilterSection = field(default_factory=FilterSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    generate: GenerateSection = field(default_factory=GenerateSection)
    vocoder: VocoderSection = field(default_factory=VocoderSection)
    evaluate: EvaluateSection = field(default_factory=EvaluateSection)
    base_dir: Path = field(default=Path("."), repr=False, compare=False)

    def __post_init__(self):
        self.validate()

    @property
    def labels(self) -> tuple[ClassLabel, ...]:
        return build_labels(self.class_order or CLASS_NAMES, self.prompts)

    def profile(self, name: str) -> ModelProfile:
        base = {"small": SMALL_PROFILE, "large": LARGE_PROFILE}.get(name)
        if base is None:
            raise ConfigurationError(f"unknown profile {name!r}; expected 'small' or 'large'")
        overrides = self.profiles.get(name, {})
        try:
            return dataclasses.replace(base, **overrides)
        except TypeError as exc:
            raise ConfigurationError(f"profiles.{name}: {exc}") from None

    def resolve(self, path: str | None) -> Path | None:
        if path is None:
            return None
        p = Path(path)
        return p if p.is_absolute() else self.base_dir / p

    @property
    def out(self) -> Path:
        return self.resolve(self.output_dir)

    @property
    def sampler_config(self) -> SamplerConfig:
        return SamplerConfig(self.sampler.steps, self.sampler.eta)

    def noise_schedule(self):
        return build_schedule(self.schedule.n, self.schedule.beta_start, self.schedule.beta_end)

    def validate(self) -> None:
        if self.class_order and sorted(self.class_order) != sorted(CLASS_NAMES):
            raise ConfigurationError(f"class_order must be a permutation of {list(CLASS_NAMES)}")
        unknown = (set(self.prompts) | set(self.routing)) - set(CLASS_NAMES)
        if unknown:
            raise ConfigurationError(f"unknown class names {sorted(unknown)}")
        for name, prof in self.routing.items():
            if prof not in ("small", "large"):
                raise ConfigurationError(f"routing.{name}: unknown profile {prof!r}")
        for name in self.profiles:
            self.profile(name)
        for name in self.generate.classes:
            if name not in CLASS_NAMES:
                raise ConfigurationError(f"generate.classes: unknown class {name!r}")
        for name, mode in self.filter.modes.items():
            if name not in CLASS_NAMES:
                raise ConfigurationError(f"filter.modes: unknown class {name!r}")
        if self.evaluate.backend not in ("random_projection", "joint_embed", "external"):
            raise ConfigurationError(f"evaluate.backend: unknown backend {self.evaluate.backend!r}")
        if self.evaluate.window_seconds <= 0:
            raise ConfigurationError(f"evaluate.window_seconds must be positive, got {self.evaluate.window_seconds}")
        if self.generate.count < 1:
            raise ConfigurationError("generate.count must be >= 1")
        self.sampler_config
        if self.sampler.steps > self.schedule.n:
            raise ConfigurationError(f"sampler.steps {self.sampler.steps} exceeds schedule.n {self.schedule.n}")
        self.noise_schedule()

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("base_dir")
        return d


def _build(cls, raw: Mapping[str, Any] | None, where: str):
    raw = dict(raw or {})
    names = {f.name for f in dataclasses.fields(cls) if f.name != "base_dir"}
    unknown = set(raw) - names
    if unknown:
        raise ConfigurationError(f"unknown config keys under {where or 'top level'}: {sorted(unknown)}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in raw:
            continue
        value = raw[f.name]
        sub = f.default_factory if f.default_factory is not dataclasses.MISSING else None
        if sub is not None and dataclasses.is_dataclass(sub):
            value = _build(sub, value, f"{where}.{f.name}".lstrip("."))
        kwargs[f.name] = value
    return cls(**kwargs)


def config_from_dict(raw: Mapping[str, Any] | None, base_dir: str | Path = ".") -> RunConfig:
    cfg = _build(RunConfig, raw, "")
    cfg.base_dir = Path(base_dir)
    return cfg


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"{path}: {exc}") from exc
    if raw is not None and not isinstance(raw, dict):
        raise ConfigurationError(f"{path}: top level must be a mapping")
    return config_from_dict(raw, path.parent)


def dump_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False), encoding="utf-8")


def route_class(label: ClassLabel | str, config: RunConfig | None = None) -> ModelProfile:
    """Small model for the five impulsive classes, large for motor and rain, unless overridden."""
    name = label.name if isinstance(label, ClassLabel) else label
    if name not in CLASS_NAMES:
        raise ConfigurationError(f"unknown class {name!r}")
    config = config or RunConfig()
    choice = config.routing.get(name, "large" if name in LARGE_CLASSES else "small")
    return config.profile(choice)
