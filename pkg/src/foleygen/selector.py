"""Similarity filtering of generated candidates against target embeddings."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .dataio import AudioClip
from .errors import ConfigurationError, InputError
from .jointembed import EmbeddingVector, JointEmbedModel, cosine_similarity, encode_audio_batch

log = logging.getLogger(__name__)

MODES = ("text", "audio_reference", "audio_reference_fad", "conjunctive")


def _vec(e) -> np.ndarray:
    return np.asarray(e.values if isinstance(e, EmbeddingVector) else e, dtype=np.float64)


@dataclass(frozen=True)
class Target:
    name: str
    vector: np.ndarray


@dataclass
class Candidate:
    candidate_id: str
    order: int
    audio_embedding: np.ndarray
    clip: AudioClip | None = None
    scores: dict[str, float] = field(default_factory=dict)

    def primary_score(self, targets: Sequence[Target]) -> float:
        return self.scores[targets[0].name]


@dataclass(frozen=True)
class FilterPolicy:
    thresholds: Mapping[str, float]
    mode: str = "text"
    targets: tuple[Target, ...] = ()
    max_resample_rounds: int = 5
    reference_k: int = 10

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"unknown filter mode {self.mode!r}; expected one of {MODES}")
        for name, t in self.thresholds.items():
            if not -1.0 <= t <= 1.0:
                raise ConfigurationError(f"threshold for {name!r} is {t}, outside [-1, 1]")
        if self.mode == "conjunctive" and not self.targets:
            raise ConfigurationError("conjunctive mode needs at least one target")
        if self.max_resample_rounds < 1:
            raise ConfigurationError("max_resample_rounds must be >= 1")

    def threshold(self, class_name: str) -> float:
        try:
            return self.thresholds[class_name]
        except KeyError:
            raise ConfigurationError(f"no filter threshold for class {class_name!r}") from None


def fad_style_score(embedding: np.ndarray, target: np.ndarray) -> float:
    """1 - ½‖e − t‖²: for unit e and ‖t‖ ≤ 1 this stays in [-1, 1]."""
    d = embedding - target
    return float(np.clip(1.0 - 0.5 * d @ d, -1.0, 1.0))


def score_candidates(candidates: Sequence[Candidate], targets: Sequence[Target], metric: str = "cosine") -> list[Candidate]:
    """Add one score per target to each candidate, in place; order is kept."""
    if not targets:
        raise InputError("need at least one target embedding")
    for cand in candidates:
        e = _vec(cand.audio_embedding)
        for t in targets:
            if t.vector.shape != e.shape:
                raise InputError(f"target {t.name!r} has dimension {t.vector.shape}, candidate has {e.shape}")
            cand.scores[t.name] = cosine_similarity(e, t.vector) if metric == "cosine" else fad_style_score(e, t.vector)
    return list(candidates)


@dataclass
class FilterOutcome:
    accepted: list[Candidate]
    fallback: bool = False


def passes(cand: Candidate, targets: Sequence[Target], mode: str, threshold: float) -> bool:
    names = [t.name for t in targets] if mode == "conjunctive" else [targets[0].name]
    return all(cand.scores[n] >= threshold for n in names)


def apply_threshold_filter(
    candidates: Sequence[Candidate],
    policy: FilterPolicy,
    class_name: str,
    targets: Sequence[Target] | None = None,
    fallback: bool = True,
) -> FilterOutcome:
    """Keep candidates at or above the class threshold.

    Conjunctive mode requires every target to pass, other modes only the first.
    With ``fallback`` and nothing passing, the single best candidate by
    primary score is returned instead.
    """
    targets = list(targets if targets is not None else policy.targets)
    if not targets:
        raise InputError("no targets to filter against")
    threshold = policy.threshold(class_name)
    accepted = [c for c in candidates if passes(c, targets, policy.mode, threshold)]
    if accepted or not fallback or not candidates:
        return FilterOutcome(accepted)
    best = min(candidates, key=lambda c: (-c.primary_score(targets), c.order))
    log.warning("no %s candidate reached threshold %.3f; falling back to best score %.3f",
                class_name, threshold, best.primary_score(targets))
    return FilterOutcome([best], fallback=True)


def select_outputs(accepted: Sequence[Candidate], required: int, targets: Sequence[Target]) -> list[Candidate]:
    """Highest primary scores first; ties go to the earlier candidate."""
    ranked = sorted(accepted, key=lambda c: (-c.primary_score(targets), c.order))
    return ranked[:required]


@dataclass(frozen=True)
class MotorReference:
    references: list[np.ndarray]
    primary: np.ndarray
    indices: list[int]


def select_reference(embeddings: Sequence | np.ndarray, k: int) -> MotorReference:
    """Top-k embeddings by cosine similarity to the set centroid, plus their mean."""
    x = np.stack([_vec(e) for e in embeddings]) if len(embeddings) else np.zeros((0, 0))
    if len(x) == 0:
        raise InputError("reference class set is empty")
    if not 1 <= k <= len(x):
        raise InputError(f"reference_k={k} must lie in [1, {len(x)}]")
    centroid = x.mean(axis=0)
    if np.linalg.norm(centroid) == 0:
        sims = np.zeros(len(x))
    else:
        sims = np.array([cosine_similarity(row, centroid) for row in x])
    order = sorted(range(len(x)), key=lambda i: (-sims[i], i))[:k]
    chosen = [x[i] for i in order]
    return MotorReference(chosen, np.mean(chosen, axis=0), order)


def build_motor_reference(mels: Sequence, model: JointEmbedModel, k: int) -> MotorReference:
    if len(mels) == 0:
        raise InputError("reference class set is empty")
    return select_reference([e.values for e in encode_audio_batch(model, mels)], k)


def default_thresholds(
    embeddings_by_class: Mapping[str, Sequence],
    targets_by_class: Mapping[str, Sequence[Target]],
    percentile: float = 25.0,
    metric_by_class: Mapping[str, str] | None = None,
) -> dict[str, float]:
    """Per class, the given percentile of training clips' primary scores."""
    metric_by_class = metric_by_class or {}
    out = {}
    for name, embs in embeddings_by_class.items():
        target = targets_by_class[name][0]
        metric = metric_by_class.get(name, "cosine")
        scores = [cosine_similarity(_vec(e), target.vector) if metric == "cosine" else fad_style_score(_vec(e), target.vector)
                  for e in embs]
        out[name] = float(np.percentile(scores, percentile))
    return out


def write_scores_csv(path: str | Path, rows: Sequence[tuple[str, str, float, bool]], append: bool = True) -> None:
    """Audit log with columns candidate_id,target,score,accepted."""
    path = Path(path)
    new = not path.exists() or not append
    with open(path, "a" if append else "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if new:
            writer.writerow(["candidate_id", "target", "score", "accepted"])
        for cid, target, score, accepted in rows:
            writer.writerow([cid, target, f"{score:.6f}", int(accepted)])
