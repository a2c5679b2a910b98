"""Windowed clip inference: blocks of length T every T/K, mean of block logits."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .config import ModelConfig
from .data.manifest import Manifest, Stats
from .data.sampling import ClipMedia, ClipStore, crop_media, normalize
from .metrics import UndefinedMetricError, acc, ap, auc


class MissingModalityError(ValueError):
    pass


@dataclass
class ClipResult:
    clip_id: str
    mean_logits: tuple[float, float]
    score: float          # softmax probability of "fake"
    prediction: int       # 1 = fake
    label: int
    category: str
    n_blocks: int


def block_count(duration: float, cfg: ModelConfig) -> int:
    if duration < cfg.clip_seconds:
        return 1
    return int(math.floor((duration - cfg.clip_seconds) / cfg.slice_seconds + 1e-9)) + 1


def block_offsets(duration: float, cfg: ModelConfig) -> list[float]:
    return [i * cfg.slice_seconds for i in range(block_count(duration, cfg))]


def clip_blocks(media: ClipMedia, cfg: ModelConfig, stats: Stats) -> tuple[torch.Tensor, torch.Tensor]:
    if media.mel.shape[0] == 0 or media.frames.shape[0] == 0:
        raise MissingModalityError("clip needs both audio and visual streams")
    audio, visual = [], []
    for offset in block_offsets(media.duration, cfg):
        mel, frames = normalize(*crop_media(media, offset, cfg), stats)
        audio.append(mel)
        visual.append(frames)
    return torch.from_numpy(np.stack(audio)), torch.from_numpy(np.stack(visual))


@torch.no_grad()
def infer_clip(media: ClipMedia, model: torch.nn.Module, cfg: ModelConfig, stats: Stats,
               chunk: int = 64) -> tuple[np.ndarray, int]:
    """Mean logits over all blocks of the clip, and the block count."""
    audio, visual = clip_blocks(media, cfg, stats)
    was_training = model.training
    model.eval()
    logits = torch.cat([model(audio[i:i + chunk], visual[i:i + chunk]) for i in range(0, len(audio), chunk)])
    model.train(was_training)
    return logits.double().mean(dim=0).numpy(), len(audio)


def infer_manifest(manifest: Manifest, model: torch.nn.Module, cfg: ModelConfig,
                   store: ClipStore | None = None) -> list[ClipResult]:
    store = store or ClipStore(manifest, cfg)
    rows = []
    for rec in sorted(manifest, key=lambda r: r.clip_id):
        logits, n = infer_clip(store.get(rec), model, cfg, store.stats)
        prob = np.exp(logits - logits.max())
        prob /= prob.sum()
        rows.append(ClipResult(rec.clip_id, (float(logits[0]), float(logits[1])), float(prob[1]),
                               int(prob[1] >= 0.5), rec.target, rec.category, n))
    return rows


def summarize(rows: list[ClipResult]) -> dict[str, float]:
    scores = [r.score for r in rows]
    labels = [r.label for r in rows]
    out = {"n": len(rows), "acc": acc([r.prediction for r in rows], labels)}
    try:
        out["auc"] = auc(scores, labels)
        out["ap"] = ap(scores, labels)
    except UndefinedMetricError:
        out["auc"] = out["ap"] = float("nan")
    return out
