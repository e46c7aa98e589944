"""Fréchet audio distance between Gaussian fits of two embedding sets."""

from __future__ import annotations

import csv
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import InputError, NumericalError, ParseError

log = logging.getLogger(__name__)

FEMB_MAGIC = b"FEMB"
_HEADER = struct.Struct("<4sII")


@dataclass(frozen=True)
class GaussianStats:
    mean: np.ndarray
    covariance: np.ndarray
    count: int

    @property
    def dim(self) -> int:
        return int(self.mean.shape[0])


def _as_matrix(embeddings) -> np.ndarray:
    rows = [np.asarray(getattr(e, "values", e), dtype=np.float64).ravel() for e in embeddings]
    dims = {r.shape[0] for r in rows}
    if len(dims) > 1:
        raise InputError(f"embeddings have mixed dimensions {sorted(dims)}")
    return np.stack(rows) if rows else np.zeros((0, 0))


def fit_gaussian(embeddings: Sequence | np.ndarray) -> GaussianStats:
    """Sample mean and unbiased covariance of a set of embeddings."""
    x = embeddings.astype(np.float64) if isinstance(embeddings, np.ndarray) else _as_matrix(embeddings)
    if x.ndim != 2:
        raise InputError(f"expected a 2-D embedding matrix, got shape {x.shape}")
    if x.shape[0] < 2:
        raise InputError(f"need at least 2 embeddings to fit a covariance, got {x.shape[0]}")
    mu = x.mean(axis=0)
    centered = x - mu
    cov = centered.T @ centered / (x.shape[0] - 1)
    return GaussianStats(mu, 0.5 * (cov + cov.T), x.shape[0])


def sqrtm_psd(matrix: np.ndarray, tol: float = 1e-8) -> np.ndarray:
    """Principal square root of a symmetric PSD matrix by eigendecomposition.

    Eigenvalues in [-tol * scale, 0) are rounding noise and clamped to zero,
    where scale is max(1, largest |eigenvalue|).
    """
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise InputError(f"expected a square matrix, got shape {m.shape}")
    scale = max(1.0, float(np.max(np.abs(m))) if m.size else 1.0)
    if np.max(np.abs(m - m.T), initial=0.0) > 1e-9 * scale:
        raise NumericalError("matrix is not symmetric")
    w, v = np.linalg.eigh(0.5 * (m + m.T))
    floor = -tol * max(1.0, float(np.max(np.abs(w), initial=0.0)))
    if np.any(w < floor):
        raise NumericalError(f"matrix is not positive semi-definite (min eigenvalue {w.min():.3e})")
    root = (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T
    return 0.5 * (root + root.T)


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    """‖μa − μb‖² + Tr(Σa + Σb − 2 (Σa^½ Σb Σa^½)^½)."""
    if a.dim != b.dim:
        raise InputError(f"dimension mismatch: {a.dim} vs {b.dim}")
    diff = a.mean - b.mean
    root_a = sqrtm_psd(a.covariance)
    inner = root_a @ b.covariance @ root_a
    cross = np.trace(sqrtm_psd(0.5 * (inner + inner.T)))
    d = float(diff @ diff + np.trace(a.covariance) + np.trace(b.covariance) - 2.0 * cross)
    if d < 0:
        # Square roots of near-zero eigenvalues carry errors of order sqrt(eps) * scale.
        scale = max(1.0, float(np.trace(a.covariance) + np.trace(b.covariance)))
        if d < -2.0 * a.dim * math.sqrt(np.finfo(float).eps) * scale:
            raise NumericalError(f"Fréchet distance came out negative ({d:.3e})")
        d = 0.0
    return d


@dataclass
class FadReport:
    per_class: dict[str, float]
    average: float
    backend: str = ""
    missing: list[str] = field(default_factory=list)

    @property
    def warning(self) -> bool:
        return bool(self.missing)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["class", "fad"])
            for name, score in self.per_class.items():
                writer.writerow([name, repr(score)])
            writer.writerow(["average", repr(self.average)])

    def format(self) -> str:
        lines = [f"{name:<24s} {score:10.4f}" for name, score in self.per_class.items()]
        lines.append(f"{'average':<24s} {self.average:10.4f}")
        if self.missing:
            lines.append(f"warning: absent classes {', '.join(self.missing)}")
        return "\n".join(lines)


def report_from_scores(
    per_class: Mapping[str, float], backend: str = "", expected: Sequence[str] | None = None
) -> FadReport:
    """Average the per-class scores; classes in ``expected`` but not scored are flagged."""
    scores = {k: float(v) for k, v in per_class.items()}
    missing = [c for c in (expected or []) if c not in scores]
    if missing:
        log.warning("FAD report missing classes %s; averaging over %d present", missing, len(scores))
    if not scores:
        raise InputError("no class has a FAD score")
    average = float(np.mean(list(scores.values())))
    return FadReport(scores, average, backend, missing)


def evaluate_classes(
    generated: Mapping[str, Sequence | np.ndarray],
    reference: Mapping[str, Sequence | np.ndarray],
    classes: Sequence[str] | None = None,
    backend: str = "",
) -> FadReport:
    classes = list(classes) if classes is not None else sorted(set(generated) | set(reference))
    scores = {}
    for name in classes:
        if name not in generated or name not in reference:
            continue
        scores[name] = frechet_distance(fit_gaussian(generated[name]), fit_gaussian(reference[name]))
    return report_from_scores(scores, backend, classes)


def write_femb(path: str | Path, embeddings: np.ndarray) -> None:
    x = np.ascontiguousarray(np.asarray(embeddings, dtype="<f4"))
    if x.ndim != 2:
        raise InputError(f"expected a (count, dim) matrix, got shape {x.shape}")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(FEMB_MAGIC, x.shape[0], x.shape[1]))
        fh.write(x.tobytes())


def read_femb(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ParseError(f"{path}: too short for a FEMB header")
    magic, count, dim = _HEADER.unpack_from(data)
    if magic != FEMB_MAGIC:
        raise ParseError(f"{path}: bad magic {magic!r}")
    expected = _HEADER.size + 4 * count * dim
    if len(data) != expected:
        raise ParseError(f"{path}: expected {expected} bytes for {count}x{dim}, found {len(data)}")
    return np.frombuffer(data, dtype="<f4", offset=_HEADER.size).reshape(count, dim).copy()
