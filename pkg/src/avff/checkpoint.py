"""``AVFP`` parameter checkpoints.

Layout (little-endian): magic ``b"AVFP"``, version u32, config fingerprint
u64, tensor count u32; then per tensor: name length u32, UTF-8 name, rank
u32, dims u32 x rank, float32 data.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
import torch
from torch import nn

from .config import ModelConfig

MAGIC = b"AVFP"
VERSION = 1
_HEAD = struct.Struct("<4sIQI")


class CheckpointError(RuntimeError):
    pass


@dataclass
class LoadReport:
    initialized: list[str] = field(default_factory=list)
    fresh: list[str] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)


def encode_tensors(tensors: dict[str, torch.Tensor], fingerprint: int) -> bytes:
    parts = [_HEAD.pack(MAGIC, VERSION, fingerprint, len(tensors))]
    for name, t in tensors.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f4")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode_tensors(data: bytes) -> tuple[int, dict[str, torch.Tensor]]:
    try:
        magic, version, fingerprint, count = _HEAD.unpack_from(data)
    except struct.error:
        raise CheckpointError("truncated checkpoint header") from None
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = _HEAD.size
    tensors = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", data, pos)
            name = data[pos + 4:pos + 4 + n].decode("utf-8")
            pos += 4 + n
            (rank,) = struct.unpack_from("<I", data, pos)
            shape = struct.unpack_from(f"<{rank}I", data, pos + 4)
            pos += 4 + 4 * rank
            size = int(np.prod(shape, dtype=np.int64))
            arr = np.frombuffer(data, dtype="<f4", count=size, offset=pos).reshape(shape)
            tensors[name] = torch.from_numpy(arr.astype(np.float32))
            pos += 4 * size
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from None
    if pos != len(data):
        raise CheckpointError("trailing bytes after last tensor")
    return fingerprint, tensors


def save_params(model: nn.Module, cfg: ModelConfig, path: str | Path) -> None:
    Path(path).write_bytes(encode_tensors(dict(model.state_dict()), cfg.fingerprint()))


def load_params(model: nn.Module, cfg: ModelConfig, path: str | Path, force: bool = False,
                only: Iterable[str] | None = None) -> LoadReport:
    """Load named tensors into ``model``.

    ``only`` restricts loading to parameters whose top-level module name is
    listed (e.g. the stage-1 backbone); everything else is reported as fresh.
    Shape mismatches are always an error; a fingerprint mismatch is an error
    unless ``force``.
    """
    fingerprint, tensors = decode_tensors(Path(path).read_bytes())
    if fingerprint != cfg.fingerprint() and not force:
        raise CheckpointError(f"{path}: config fingerprint {fingerprint:016x} does not match "
                              f"{cfg.fingerprint():016x}")
    state = model.state_dict()
    only = set(only) if only is not None else None
    report = LoadReport()
    mismatched = []
    updates = {}
    for name, target in state.items():
        wanted = only is None or name.split(".")[0] in only
        if not wanted or name not in tensors:
            report.fresh.append(name)
            continue
        src = tensors[name]
        if tuple(src.shape) != tuple(target.shape):
            mismatched.append(f"{name}: checkpoint {tuple(src.shape)} vs model {tuple(target.shape)}")
            continue
        updates[name] = src.to(target.dtype)
        report.initialized.append(name)
    if mismatched:
        raise CheckpointError("mismatched tensors:\n  " + "\n  ".join(mismatched))
    if only is None and report.fresh:
        raise CheckpointError(f"checkpoint lacks tensors: {report.fresh[:10]}")
    report.skipped = [n for n in tensors if n not in state]
    model.load_state_dict({**state, **updates})
    return report
