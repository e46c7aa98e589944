"""Versioned, fingerprinted checkpoint files.

Layout: ``FGCK`` magic, uint32 format version, uint32 header length, uint64
payload length, JSON header, torch-serialized state dict, SHA-256 of the
payload.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import torch
from torch import nn

from ..errors import (
    CheckpointError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    FingerprintMismatchError,
)

MAGIC = b"FGCK"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<4sIIQ")
_DIGEST = 32


def fingerprint(config: Any) -> str:
    """SHA-256 of the canonical JSON serialization of a module config."""
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


@dataclass
class Checkpoint:
    module: str
    fingerprint: str
    state: dict[str, torch.Tensor]
    config: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION


def save_checkpoint(module: str, model: nn.Module, config: dict, path: str | Path, extra: dict | None = None) -> Checkpoint:
    """Write atomically (temp file + rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = {k: v.detach().cpu().clone() for k, v in model.state_dict().items()}
    buf = io.BytesIO()
    torch.save(state, buf)
    payload = buf.getvalue()
    ckpt = Checkpoint(module, fingerprint(config), state, config, dict(extra or {}))
    header = json.dumps(
        {"module": module, "fingerprint": ckpt.fingerprint, "config": config, "extra": ckpt.extra},
        sort_keys=True,
        default=str,
    ).encode()
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, FORMAT_VERSION, len(header), len(payload)))
        fh.write(header)
        fh.write(payload)
        fh.write(hashlib.sha256(payload).digest())
    os.replace(tmp, path)
    return ckpt


def load_checkpoint(path: str | Path, expected_fingerprint: str | None = None, module: str | None = None) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint {path} does not exist")
    data = path.read_bytes()
    if len(data) < _PREFIX.size:
        raise CheckpointTruncatedError(f"{path}: truncated before the header ({len(data)} bytes)")
    magic, version, header_len, payload_len = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (magic {magic!r})")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, this build reads {FORMAT_VERSION}")
    expected_len = _PREFIX.size + header_len + payload_len + _DIGEST
    if len(data) < expected_len:
        raise CheckpointTruncatedError(f"{path}: {len(data)} bytes, header declares {expected_len}")
    if len(data) > expected_len:
        raise CheckpointError(f"{path}: {len(data) - expected_len} trailing bytes")
    header = json.loads(data[_PREFIX.size : _PREFIX.size + header_len])
    start = _PREFIX.size + header_len
    payload = data[start : start + payload_len]
    if hashlib.sha256(payload).digest() != data[start + payload_len :]:
        raise CheckpointError(f"{path}: payload checksum mismatch")
    if module is not None and header["module"] != module:
        raise CheckpointError(f"{path}: holds module {header['module']!r}, expected {module!r}")
    if expected_fingerprint is not None and header["fingerprint"] != expected_fingerprint:
        raise FingerprintMismatchError(
            f"{path}: fingerprint {header['fingerprint'][:12]} does not match current config {expected_fingerprint[:12]}"
        )
    state = torch.load(io.BytesIO(payload), weights_only=True)
    return Checkpoint(header["module"], header["fingerprint"], state, header["config"], header.get("extra", {}), version)


def restore(model: nn.Module, ckpt: Checkpoint) -> nn.Module:
    model.load_state_dict(ckpt.state, strict=True)
    model.eval()
    return model
