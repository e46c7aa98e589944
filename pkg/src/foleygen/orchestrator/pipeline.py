"""End-to-end jobs: staged transfer training, generation with filtering, evaluation."""

from __future__ import annotations

import contextlib
import dataclasses
import json
import logging
import os
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch

from ..backends import ExternalBackend, JointEmbedBackend, RandomProjectionBackend
from ..dataio import (
    CLASS_NAMES,
    AudioClip,
    ClassLabel,
    load_manifest,
    load_split,
    read_wav,
    resample,
    trim_or_pad,
    write_wav,
)
from ..errors import (
    CheckpointError,
    ConfigurationError,
    FoleyError,
    InputError,
    StageError,
)
from ..fadmetric import FadReport, evaluate_classes
from ..jointembed import JointEmbedModel, encode_audio_batch, encode_text, train_joint_embedding
from ..latentdiff import DenoiserModel, sample_latents, train_ldm
from ..selector import (
    Candidate,
    FilterPolicy,
    Target,
    apply_threshold_filter,
    default_thresholds,
    score_candidates,
    select_outputs,
    select_reference,
    write_scores_csv,
)
from ..specops import GriffinLimVocoder, MelConfig, MelSpectrogram, mel_forward
from ..torchutil import freeze, state_checksum
from ..vaecodec import VaeModel, decode_batch, to_channels_first, train_vae
from .checkpoint import fingerprint, load_checkpoint, restore, save_checkpoint
from .config import OUTPUT_RATE, ModelProfile, RunConfig, route_class

log = logging.getLogger("foleygen")

STAGES = ("clap", "vae", "ldm_pretrain", "ldm_finetune")
_STAGE_OFFSETS = {name: i * 7919 for i, name in enumerate(STAGES)}


class _IsoFormatter(logging.Formatter):
    def formatTime(self, record, datefmt=None):
        return datetime.fromtimestamp(record.created, timezone.utc).isoformat(timespec="milliseconds")


@contextlib.contextmanager
def run_log(out: Path) -> Iterator[logging.Handler]:
    """Append this run's log records to ``<out>/run.log``."""
    out.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(out / "run.log", mode="a", encoding="utf-8")
    handler.setFormatter(_IsoFormatter("%(asctime)s %(levelname)s %(message)s"))
    root = logging.getLogger("foleygen")
    root.addHandler(handler)
    previous = root.level
    root.setLevel(logging.INFO)
    try:
        yield handler
    finally:
        root.removeHandler(handler)
        root.setLevel(previous)
        handler.close()


@contextlib.contextmanager
def output_lock(out: Path) -> Iterator[Path]:
    out.mkdir(parents=True, exist_ok=True)
    lock = out / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ConfigurationError(f"output directory {out} is locked by another run (remove {lock} if stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield lock
    finally:
        lock.unlink(missing_ok=True)


def stage_seed(seed: int, stage: str) -> int:
    return seed + _STAGE_OFFSETS[stage]


@dataclass
class TrainingData:
    mels: np.ndarray
    prompts: list[str | None]
    class_names: list[str | None]


@dataclass
class ProfileModels:
    profile: ModelProfile
    mel: MelConfig
    clap: JointEmbedModel
    vae: VaeModel
    ldm: DenoiserModel


class Workspace:
    """Data and checkpoint access for one run configuration."""

    def __init__(self, config: RunConfig, seed: int | None = None):
        self.config = config
        self.seed = config.seed if seed is None else seed
        self.out = config.out
        self.labels = config.labels
        self._data: dict[tuple[str, str], TrainingData] = {}

    # data -----------------------------------------------------------------

    def manifest_path(self, split: str) -> Path | None:
        d = self.config.data
        return self.config.resolve({"train": d.train_manifest or None, "pretrain": d.pretrain_manifest,
                                    "reference": d.reference_manifest or d.train_manifest or None}[split])

    def check_paths(self) -> None:
        """Fail at job start when a configured manifest is missing."""
        for split in ("train", "pretrain", "reference"):
            path = self.manifest_path(split)
            if path is not None and not path.is_file():
                raise ConfigurationError(f"{split} manifest {path} does not exist")

    def training_data(self, profile: ModelProfile, split: str) -> TrainingData | None:
        key = (profile.name, split)
        if key in self._data:
            return self._data[key]
        path = self.manifest_path(split)
        if path is None:
            if split == "train":
                raise ConfigurationError("data.train_manifest is required")
            return None
        seconds = self.config.data.pretrain_clip_seconds if split == "pretrain" else self.config.data.clip_seconds
        mel_cfg = profile.mel_config(self.config.data.clip_seconds)
        clips = load_split(load_manifest(path, n_classes=len(self.labels)), profile.sample_rate, seconds, self.labels)
        data = TrainingData(
            np.stack([mel_forward(c, mel_cfg).values.astype(np.float32) for c in clips]),
            [c.text for c in clips],
            [c.label.name if c.label else None for c in clips],
        )
        self._data[key] = data
        return data

    # checkpoints ----------------------------------------------------------

    def checkpoint_path(self, profile: ModelProfile, stage: str) -> Path:
        return self.out / "checkpoints" / profile.name / f"{stage}.ckpt"

    def stage_config(self, profile: ModelProfile, stage: str) -> dict:
        cfg, t = self.config, self.config.training
        secs = cfg.data.clip_seconds
        base = {"stage": stage, "profile": dataclasses.asdict(profile), "seed": stage_seed(self.seed, stage),
                "clip_seconds": secs}
        if stage == "clap":
            base.update(model=profile.joint_config(secs, [l.prompt for l in self.labels]).as_dict(),
                        epochs=t.clap_epochs, batch_size=t.clap_batch_size, lr=t.clap_lr,
                        data=str(self.manifest_path("train")))
        elif stage == "vae":
            base.update(model=profile.vae_config(secs).as_dict(), epochs=t.vae_epochs, batch_size=t.vae_batch_size,
                        lr=t.vae_lr, data=[str(self.manifest_path("train")), str(self.manifest_path("pretrain"))])
        else:
            base.update(model=profile.denoiser_config(secs).as_dict(), schedule=dataclasses.asdict(cfg.schedule),
                        batch_size=t.ldm_batch_size, lr=t.ldm_lr)
            if stage == "ldm_pretrain":
                base.update(epochs=t.pretrain_epochs, data=str(self.manifest_path("pretrain") or self.manifest_path("train")),
                            upstream=[self.stage_fingerprint(profile, "clap"), self.stage_fingerprint(profile, "vae")])
            else:
                base.update(epochs=t.finetune_epochs, data=str(self.manifest_path("train")),
                            prompts=[l.prompt for l in self.labels],
                            upstream=[self.stage_fingerprint(profile, "ldm_pretrain")])
        return base

    def stage_fingerprint(self, profile: ModelProfile, stage: str) -> str:
        return fingerprint(self.stage_config(profile, stage))

    def fresh_model(self, profile: ModelProfile, stage: str):
        secs = self.config.data.clip_seconds
        seed = stage_seed(self.seed, stage)
        if stage == "clap":
            return JointEmbedModel(profile.joint_config(secs, [l.prompt for l in self.labels]), seed)
        if stage == "vae":
            return VaeModel(profile.vae_config(secs), seed)
        return DenoiserModel(profile.denoiser_config(secs), seed, self.config.noise_schedule())

    def load_stage(self, profile: ModelProfile, stage: str):
        path = self.checkpoint_path(profile, stage)
        if not path.is_file():
            raise CheckpointError(f"missing checkpoint for stage {stage!r} of profile {profile.name!r}: {path}")
        ckpt = load_checkpoint(path, self.stage_fingerprint(profile, stage), module=stage)
        return restore(self.fresh_model(profile, stage), ckpt)

    def load_models(self, profile: ModelProfile) -> ProfileModels:
        return ProfileModels(
            profile,
            profile.mel_config(self.config.data.clip_seconds),
            freeze(self.load_stage(profile, "clap")),
            freeze(self.load_stage(profile, "vae")),
            freeze(self.load_stage(profile, "ldm_finetune")),
        )

    def profiles_in_use(self) -> list[ModelProfile]:
        names = self.config.generate.classes or list(CLASS_NAMES)
        seen: dict[str, ModelProfile] = {}
        for name in names:
            p = route_class(name, self.config)
            seen.setdefault(p.name, p)
        return [seen[k] for k in sorted(seen, key=lambda n: ("small", "large").index(n))]


def _run_stage(ws: Workspace, profile: ModelProfile, stage: str) -> dict:
    t = ws.config.training
    seed = stage_seed(ws.seed, stage)
    model = ws.fresh_model(profile, stage)
    train = ws.training_data(profile, "train")
    extra: dict = {}
    if stage == "clap":
        examples = [(m, p) for m, p in zip(train.mels, train.prompts) if p]
        _, trace = train_joint_embedding(model, examples, t.clap_epochs, seed, t.clap_batch_size, t.clap_lr)
    elif stage == "vae":
        pre = ws.training_data(profile, "pretrain")
        mels = train.mels if pre is None else np.concatenate([pre.mels, train.mels])
        _, trace = train_vae(model, mels, t.vae_epochs, seed, t.vae_batch_size, t.vae_lr)
    else:
        clap = freeze(ws.load_stage(profile, "clap"))
        vae = freeze(ws.load_stage(profile, "vae"))
        before = {"clap": state_checksum(clap), "vae": state_checksum(vae)}
        schedule = ws.config.noise_schedule()
        if stage == "ldm_pretrain":
            data = ws.training_data(profile, "pretrain") or train
            _, trace = train_ldm(model, "pretrain", data.mels, None, vae, clap, schedule, t.pretrain_epochs, seed,
                                 t.ldm_batch_size, t.ldm_lr)
        else:
            model = restore(model, load_checkpoint(ws.checkpoint_path(profile, "ldm_pretrain"),
                                                   ws.stage_fingerprint(profile, "ldm_pretrain"), "ldm_pretrain"))
            _, trace = train_ldm(model, "finetune", train.mels, train.prompts, vae, clap, schedule,
                                 t.finetune_epochs, seed, t.ldm_batch_size, t.ldm_lr)
        extra["frozen_checksums"] = before
    extra["trace"] = trace
    save_checkpoint(stage, model, ws.stage_config(profile, stage), ws.checkpoint_path(profile, stage), extra)
    return extra


def run_transfer_pipeline(config: RunConfig, seed: int | None = None, stages: Sequence[str] = STAGES,
                          workspace: Workspace | None = None) -> dict[str, dict[str, Path]]:
    """Train (or resume) the requested stages for every profile in use, in stage order.

    A stage whose checkpoint exists with a matching fingerprint is skipped; a
    checkpoint with a different fingerprint is an error.
    """
    ws = workspace or Workspace(config, seed)
    paths: dict[str, dict[str, Path]] = {}
    for profile in ws.profiles_in_use():
        paths[profile.name] = {}
        for stage in STAGES:
            if stage not in stages:
                continue
            path = ws.checkpoint_path(profile, stage)
            expected = ws.stage_fingerprint(profile, stage)
            if path.is_file():
                load_checkpoint(path, expected, module=stage)
                log.info("stage %s/%s skipped: checkpoint fingerprint matches", profile.name, stage)
                paths[profile.name][stage] = path
                continue
            log.info("stage %s/%s started", profile.name, stage)
            try:
                extra = _run_stage(ws, profile, stage)
            except FoleyError as exc:
                log.error("stage %s/%s failed: %s", profile.name, stage, exc)
                raise StageError(f"{profile.name}/{stage}", str(exc)) from exc
            trace = extra["trace"]
            last = trace[-1] if trace else None
            log.info("stage %s/%s finished: %d epochs, final loss %s", profile.name, stage, len(trace), last)
            paths[profile.name][stage] = path
    return paths


# generation -----------------------------------------------------------------


@dataclass
class ClassTargets:
    targets: list[Target]
    metric: str
    mode: str


def class_targets(ws: Workspace, models: ProfileModels, label: ClassLabel) -> ClassTargets:
    f = ws.config.filter
    mode = f.modes.get(label.name, "text")
    if mode == "text":
        return ClassTargets([Target(label.prompt, encode_text(models.clap, label.prompt).values)], "cosine", mode)
    if mode == "conjunctive":
        prompts = f.conjunctive_prompts.get(label.name) or [label.prompt]
        return ClassTargets([Target(p, encode_text(models.clap, p).values) for p in prompts], "cosine", mode)
    train = ws.training_data(models.profile, "train")
    mels = [m for m, c in zip(train.mels, train.class_names) if c == label.name]
    if not mels:
        raise InputError(f"no training clips of class {label.name!r} to build the audio reference from")
    embs = [e.values for e in encode_audio_batch(models.clap, mels)]
    ref = select_reference(embs, min(f.reference_k, len(embs)))
    metric = "fad" if mode == "audio_reference_fad" else "cosine"
    return ClassTargets([Target("audio_reference", ref.primary)], metric, mode)


def class_threshold(ws: Workspace, models: ProfileModels, label: ClassLabel, targets: ClassTargets) -> float:
    f = ws.config.filter
    if label.name in f.thresholds:
        return float(f.thresholds[label.name])
    train = ws.training_data(models.profile, "train")
    mels = [m for m, c in zip(train.mels, train.class_names) if c == label.name]
    if not mels:
        raise InputError(f"no training clips of class {label.name!r} to derive a threshold from")
    embs = [e.values for e in encode_audio_batch(models.clap, mels)]
    return default_thresholds({label.name: embs}, {label.name: targets.targets}, f.percentile,
                              {label.name: targets.metric})[label.name]


@dataclass
class GenerationResult:
    label: ClassLabel
    paths: list[Path]
    selected: list[Candidate]
    candidates: list[Candidate]
    threshold: float
    fallback: bool = False
    starved: bool = False
    targets: list[Target] = field(default_factory=list)


def candidate_seed(seed: int, label: ClassLabel, round_index: int) -> int:
    return (seed * 1_000_003 + label.id * 10_007 + round_index * 101) % (2**63)


def _render(ws: Workspace, models: ProfileModels, latents) -> tuple[list[AudioClip], list[np.ndarray]]:
    """Latents -> mels -> waveform at the output rate; also returns each clip's profile-rate mel."""
    vocoder = GriffinLimVocoder(ws.config.vocoder.iters)
    z = np.stack([l.values for l in latents])
    mels = decode_batch(models.vae, torch.stack([to_channels_first(v) for v in z]))
    clips, heard = [], []
    secs = ws.config.data.clip_seconds
    for m in mels:
        wave = vocoder(MelSpectrogram(m, models.mel))
        heard.append(mel_forward(wave, models.mel).values)
        if models.profile.upsample_to:
            wave = resample(wave, models.profile.upsample_to)
        clips.append(trim_or_pad(wave, secs))
    return clips, heard


def generate_clips(
    config: RunConfig,
    label: ClassLabel | str,
    count: int,
    seed: int | None = None,
    out_dir: Path | None = None,
    filtered: bool | None = None,
    workspace: Workspace | None = None,
    models: ProfileModels | None = None,
) -> GenerationResult:
    """Prompt -> text embedding -> latents -> mel -> waveform, then similarity filtering.

    Writes ``<out>/<class>/<class>_<i>.wav`` and appends to ``<out>/scores.csv``.
    """
    ws = workspace or Workspace(config, seed)
    if isinstance(label, str):
        label = next((l for l in ws.labels if l.name == label), None) or _unknown(label)
    f = config.filter
    filtered = f.enabled if filtered is None else filtered
    out = Path(out_dir) if out_dir is not None else ws.out
    profile = route_class(label, config)
    models = models or ws.load_models(profile)
    cond = encode_text(models.clap, label.prompt)
    targets = class_targets(ws, models, label)
    threshold = class_threshold(ws, models, label, targets)
    policy = FilterPolicy({label.name: threshold}, targets.mode, tuple(targets.targets),
                          f.max_resample_rounds, f.reference_k)
    per_round = f.candidates_per_round or 2 * count
    rounds = f.max_resample_rounds if filtered else 1
    if not filtered:
        per_round = max(per_round, count)

    candidates: list[Candidate] = []
    for r in range(rounds):
        latents = sample_latents(models.ldm, cond, config.sampler_config, config.noise_schedule(),
                                 candidate_seed(ws.seed, label, r), per_round)
        clips, heard = _render(ws, models, latents)
        embs = encode_audio_batch(models.clap, heard)
        batch = [Candidate(f"{label.name}_r{r}_{j}", len(candidates) + j, e.values, clip)
                 for j, (e, clip) in enumerate(zip(embs, clips))]
        candidates += score_candidates(batch, targets.targets, targets.metric)
        if filtered:
            passed = apply_threshold_filter(candidates, policy, label.name, targets.targets, fallback=False)
            log.info("%s round %d: %d/%d candidates pass threshold %.4f", label.name, r, len(passed.accepted),
                     len(candidates), threshold)
            if len(passed.accepted) >= count:
                break

    fallback = starved = False
    if filtered:
        outcome = apply_threshold_filter(candidates, policy, label.name, targets.targets, fallback=True)
        fallback = outcome.fallback
        selected = select_outputs(outcome.accepted, count, targets.targets)
        if len(selected) < count:
            starved = True
            log.warning("%s: only %d of %d outputs passed the filter after %d rounds; filling with best remaining",
                        label.name, len(selected), count, rounds)
            chosen = {c.candidate_id for c in selected}
            rest = [c for c in candidates if c.candidate_id not in chosen]
            selected += select_outputs(rest, count - len(selected), targets.targets)
    else:
        selected = candidates[:count]

    class_dir = out / label.name
    class_dir.mkdir(parents=True, exist_ok=True)
    for stale in class_dir.glob(f"{label.name}_*.wav"):
        stale.unlink()
    paths = []
    for i, cand in enumerate(selected):
        path = class_dir / f"{label.name}_{i}.wav"
        write_wav(path, cand.clip)
        paths.append(path)
    chosen = {c.candidate_id for c in selected}
    write_scores_csv(out / "scores.csv", [(c.candidate_id, t.name, c.scores[t.name], c.candidate_id in chosen)
                                         for c in candidates for t in targets.targets])
    log.info("%s: wrote %d clips via %s profile (threshold %.4f, %d candidates%s)", label.name, len(paths),
             profile.name, threshold, len(candidates), ", fallback" if fallback else "")
    return GenerationResult(label, paths, selected, candidates, threshold, fallback, starved, targets.targets)


def _unknown(name: str):
    raise ConfigurationError(f"unknown class {name!r}")


def generate_all(config: RunConfig, seed: int | None = None, out_dir: Path | None = None,
                 filtered: bool | None = None, workspace: Workspace | None = None) -> dict[str, GenerationResult]:
    ws = workspace or Workspace(config, seed)
    out = Path(out_dir) if out_dir is not None else ws.out
    out.mkdir(parents=True, exist_ok=True)
    (out / "scores.csv").unlink(missing_ok=True)
    names = config.generate.classes or [l.name for l in ws.labels]
    loaded: dict[str, ProfileModels] = {}
    results = {}
    for name in names:
        profile = route_class(name, config)
        if profile.name not in loaded:
            loaded[profile.name] = ws.load_models(profile)
        results[name] = generate_clips(config, name, config.generate.count, ws.seed, out, filtered, ws,
                                       loaded[profile.name])
    (out / "thresholds.json").write_text(
        json.dumps({k: r.threshold for k, r in results.items()}, indent=2, sort_keys=True) + "\n"
    )
    return results


# evaluation -----------------------------------------------------------------


def _generated_clips(out: Path, class_name: str) -> list[AudioClip]:
    files = sorted((out / class_name).glob(f"{class_name}_*.wav"), key=lambda p: int(p.stem.rsplit("_", 1)[1]))
    clips = []
    for p in files:
        data, rate = read_wav(p)
        clips.append(AudioClip(data.mean(axis=1), rate, source_id=p.name))
    return clips


def make_backend(config: RunConfig, name: str | None = None, workspace: Workspace | None = None):
    name = name or config.evaluate.backend
    if name == "random_projection":
        return RandomProjectionBackend(config.evaluate.dim, config.evaluate.projection_seed,
                                       config.profile("small").mel_config(config.data.clip_seconds),
                                       config.evaluate.window_seconds)
    if name == "joint_embed":
        ws = workspace or Workspace(config)
        profile = config.profile("small")
        return JointEmbedBackend(freeze(ws.load_stage(profile, "clap")), profile.mel_config(config.data.clip_seconds))
    if name == "external":
        return None
    raise ConfigurationError(f"unknown evaluation backend {name!r}")


def embed_outputs(out: Path, backend, classes: Sequence[str]) -> dict[str, np.ndarray]:
    found = {}
    for name in classes:
        clips = _generated_clips(out, name)
        if clips:
            found[name] = backend.embed(clips)
    return found


def embed_reference(config: RunConfig, manifest_path: Path, backend, labels: Sequence[ClassLabel]) -> dict[str, np.ndarray]:
    # Load straight at the backend's analysis rate so references and outputs share one resampling path.
    mel_config = getattr(backend, "mel_config", None)
    rate = mel_config.sample_rate if mel_config is not None else OUTPUT_RATE
    clips = load_split(load_manifest(manifest_path, n_classes=len(labels)), rate, config.data.clip_seconds, labels)
    by_class: dict[str, list[AudioClip]] = {}
    for c in clips:
        if c.label is not None:
            by_class.setdefault(c.label.name, []).append(c)
    return {k: backend.embed(v) for k, v in by_class.items()}


def evaluate_run(
    config: RunConfig,
    output_dir: Path | None = None,
    reference_manifest: Path | None = None,
    backend: str | None = None,
    write: bool = True,
) -> FadReport:
    """FAD of generated outputs against a reference set, per class and averaged."""
    out = Path(output_dir) if output_dir is not None else config.out
    name = backend or config.evaluate.backend
    classes = config.generate.classes or [l.name for l in config.labels]
    if name == "external":
        gen_dir = config.resolve(config.evaluate.generated_embeddings)
        ref_dir = config.resolve(config.evaluate.reference_embeddings)
        if gen_dir is None or ref_dir is None:
            raise ConfigurationError("external backend needs evaluate.generated_embeddings and evaluate.reference_embeddings")
        gen_b, ref_b = ExternalBackend(gen_dir), ExternalBackend(ref_dir)
        generated = {c: gen_b.load(c) for c in classes if c in gen_b.available()}
        reference = {c: ref_b.load(c) for c in classes if c in ref_b.available()}
    else:
        b = make_backend(config, name)
        ref_path = Path(reference_manifest) if reference_manifest is not None else Workspace(config).manifest_path("reference")
        if ref_path is None:
            raise ConfigurationError("no reference manifest configured")
        generated = embed_outputs(out, b, classes)
        reference = embed_reference(config, ref_path, b, config.labels)
    report = evaluate_classes(generated, reference, classes, backend=name)
    if write:
        out.mkdir(parents=True, exist_ok=True)
        report.to_csv(out / "fad_report.csv")
    log.info("FAD (%s backend): average %.4f over %d classes", name, report.average, len(report.per_class))
    return report


def run_pipeline(config: RunConfig, seed: int | None = None) -> FadReport:
    """Train all stages, generate every class, evaluate."""
    ws = Workspace(config, seed)
    ws.check_paths()
    with output_lock(ws.out), run_log(ws.out):
        log.info("pipeline started (seed %d)", ws.seed)
        run_transfer_pipeline(config, workspace=ws)
        log.info("stage generate started")
        generate_all(config, workspace=ws)
        log.info("stage evaluate started")
        report = evaluate_run(config, ws.out)
        log.info("pipeline finished")
    return report
