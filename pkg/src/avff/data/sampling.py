"""Clip sampling, stage-1/stage-2 batch construction and source-level splits."""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch

from ..config import ModelConfig
from .audio import LOG_FLOOR, log_mel
from .manifest import Manifest, Record, Stats
from .tensorio import read_tensor

log = logging.getLogger(__name__)

GRAY_WEIGHTS = np.array([0.299, 0.587, 0.114], dtype=np.float32)


class IngestionError(RuntimeError):
    pass


@dataclass
class ClipMedia:
    mel: np.ndarray      # (frames, mel_bins), raw log-mel
    frames: np.ndarray   # (n, C, H, W), raw pixels
    duration: float


@dataclass
class ClipSample:
    audio: np.ndarray    # (T_a, L), normalised
    visual: np.ndarray   # (T_v, C, H, W), normalised
    label: str
    category: str
    clip_id: str
    source_id: str
    time_offset: float
    meta: dict = field(default_factory=dict)

    @property
    def target(self) -> int:
        return 1 if self.label == "fake" else 0


@dataclass
class Batch:
    audio: torch.Tensor
    visual: torch.Tensor
    target: torch.Tensor
    clip_ids: list[str]
    source_ids: list[str]
    offsets: list[float]

    def __len__(self) -> int:
        return len(self.clip_ids)


AudioTransform = Callable[[np.ndarray], np.ndarray]


class ClipStore:
    """Loads and caches decoded media for the records of a manifest.

    Rank-1 audio tensors are waveforms at ``cfg.audio_sample_rate`` and go
    through :func:`log_mel` (after ``audio_transform``, if given); rank-2 audio
    tensors are taken as precomputed log-mel spectrograms.
    """

    def __init__(self, manifest: Manifest, cfg: ModelConfig,
                 audio_transform: AudioTransform | None = None, cache: bool = True):
        self.manifest = manifest
        self.cfg = cfg
        self.audio_transform = audio_transform
        self.cache = cache
        self._media: dict[str, ClipMedia] = {}

    @property
    def stats(self) -> Stats:
        return self.manifest.stats

    def waveform(self, record: Record) -> np.ndarray:
        audio = self._read(record, record.audio_path)
        if audio.ndim != 1:
            raise IngestionError(f"{record.clip_id}: audio is not a waveform (shape {audio.shape})")
        return audio

    def get(self, record: Record) -> ClipMedia:
        media = self._media.get(record.clip_id)
        if media is None:
            media = self._load(record)
            if self.cache:
                self._media[record.clip_id] = media
        return media

    def _read(self, record: Record, path: str) -> np.ndarray:
        try:
            return read_tensor(self.manifest.resolve(path))
        except (OSError, ValueError) as exc:
            raise IngestionError(f"{record.clip_id}: cannot read {path}: {exc}") from exc

    def _load(self, record: Record) -> ClipMedia:
        cfg = self.cfg
        audio = self._read(record, record.audio_path)
        if audio.ndim == 1:
            if self.audio_transform is not None:
                audio = self.audio_transform(audio)
            mel = log_mel(audio, cfg)
        elif audio.ndim == 2:
            mel = audio
        else:
            raise IngestionError(f"{record.clip_id}: audio tensor must be rank 1 or 2, got {audio.ndim}")
        if mel.shape[1] != cfg.mel_bins:
            raise IngestionError(f"{record.clip_id}: expected {cfg.mel_bins} mel bins, got {mel.shape[1]}")
        frames = self._read(record, record.frames_path)
        want = (cfg.channels, cfg.visual_size, cfg.visual_size)
        if frames.ndim != 4 or frames.shape[1:] != want:
            raise IngestionError(f"{record.clip_id}: expected frames (n, {want[0]}, {want[1]}, {want[2]}), "
                                 f"got {frames.shape}")
        if not (np.isfinite(mel).all() and np.isfinite(frames).all()):
            raise IngestionError(f"{record.clip_id}: non-finite media values")
        return ClipMedia(mel.astype(np.float32), frames.astype(np.float32), record.duration_s)


def offset_grid(duration: float, cfg: ModelConfig) -> int:
    """Number of admissible start offsets (multiples of one visual frame period)."""
    spare = duration - cfg.clip_seconds
    if spare < 0:
        return 1
    return int(math.floor(spare * cfg.visual_fps + 1e-6)) + 1


def visual_frame_indices(offset: float, cfg: ModelConfig) -> np.ndarray:
    """Source-frame indices for one clip: evenly placed inside each slice.

    With two frames per slice these sit at the first and third quartile of
    the slice span.
    """
    per_slice = cfg.visual_frames // cfg.num_slices
    slice_len = cfg.slice_seconds
    times = [offset + i * slice_len + (j + 0.5) / per_slice * slice_len
             for i in range(cfg.num_slices) for j in range(per_slice)]
    return np.floor(np.asarray(times) * cfg.visual_fps + 1e-6).astype(np.int64)


def audio_frame_start(offset: float, cfg: ModelConfig) -> int:
    return int(round(offset * 1000.0 / cfg.mel_hop_ms))


def crop_media(media: ClipMedia, offset: float, cfg: ModelConfig) -> tuple[np.ndarray, np.ndarray]:
    """Raw (un-normalised) audio/visual windows starting at ``offset`` seconds."""
    start = audio_frame_start(offset, cfg)
    mel = media.mel[start:start + cfg.audio_frames]
    if mel.shape[0] < cfg.audio_frames:
        pad = np.full((cfg.audio_frames - mel.shape[0], cfg.mel_bins), np.log(LOG_FLOOR), np.float32)
        mel = np.concatenate([mel, pad], axis=0)
    idx = np.minimum(visual_frame_indices(offset, cfg), len(media.frames) - 1)
    return mel, media.frames[idx]


def augment_frames(frames: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Random grayscale and horizontal flip, each p=0.5, applied to the whole clip."""
    gray, flip = rng.random(2) < 0.5
    if gray and frames.shape[1] == 3:
        lum = np.tensordot(frames, GRAY_WEIGHTS, axes=([1], [0]))[:, None]
        frames = np.repeat(lum, 3, axis=1)
    if flip:
        frames = frames[..., ::-1]
    return np.ascontiguousarray(frames)


def normalize(mel: np.ndarray, frames: np.ndarray, stats: Stats) -> tuple[np.ndarray, np.ndarray]:
    return ((mel - stats.mean_a) / stats.std_a).astype(np.float32), \
        ((frames - stats.mean_v) / stats.std_v).astype(np.float32)


def sample_clip(record: Record, cfg: ModelConfig, rng: np.random.Generator, augment: bool = False,
                store: ClipStore | None = None, offset: float | None = None) -> ClipSample:
    if store is None:
        raise ValueError("sample_clip needs a ClipStore to read media from")
    media = store.get(record)
    if offset is None:
        offset = int(rng.integers(offset_grid(media.duration, cfg))) / cfg.visual_fps
    mel, frames = crop_media(media, offset, cfg)
    if augment:
        frames = augment_frames(frames, rng)
    audio, visual = normalize(mel, frames, store.stats)
    return ClipSample(audio, visual, record.label, record.category, record.clip_id,
                      record.source_id, float(offset))


def _second_offset(first: int, n_pos: int, cfg: ModelConfig, rng: np.random.Generator) -> tuple[int, bool]:
    """Pick a second grid offset; returns (index, overlapping)."""
    steps = np.arange(n_pos)
    gap = np.abs(steps - first) / cfg.visual_fps
    for min_gap, overlapping in ((cfg.clip_seconds - 1e-9, False), (cfg.slice_seconds - 1e-9, True),
                                 (1e-9, True)):
        candidates = steps[gap >= min_gap]
        if candidates.size:
            return int(rng.choice(candidates)), overlapping
    return first, True


def make_stage1_batch(manifest: Manifest, cfg: ModelConfig, rng: np.random.Generator, batch_size: int,
                      store: ClipStore | None = None) -> list[ClipSample]:
    """``batch_size // 2`` real sources, each sampled twice at different offsets."""
    if batch_size < 2 or batch_size % 2:
        raise ValueError(f"stage-1 batch size must be even and >= 2, got {batch_size}")
    if any(r.is_fake for r in manifest):
        raise ValueError("stage-1 batches draw from real clips only")
    store = store or ClipStore(manifest, cfg)
    sources = manifest.sources()
    names = sorted(sources)
    n = batch_size // 2
    picks = rng.choice(len(names), size=n, replace=len(names) < n)
    batch = []
    for i in picks:
        recs = sources[names[i]]
        rec = recs[int(rng.integers(len(recs)))]
        n_pos = offset_grid(rec.duration_s, cfg)
        first = int(rng.integers(n_pos))
        second, overlapping = _second_offset(first, n_pos, cfg, rng)
        for j in (first, second):
            sample = sample_clip(rec, cfg, rng, cfg.augment_stage1, store, offset=j / cfg.visual_fps)
            sample.meta["overlapping"] = overlapping
            batch.append(sample)
    return batch


def class_weights(manifest: Manifest) -> np.ndarray:
    """Per-record sampling weight, inversely proportional to its class frequency."""
    labels = [r.label for r in manifest]
    counts = {lab: labels.count(lab) for lab in set(labels)}
    if len(counts) < 2:
        warnings.warn("manifest holds a single class; sampling uniformly", stacklevel=2)
        return np.full(len(labels), 1.0 / len(labels))
    w = np.array([1.0 / counts[lab] for lab in labels])
    return w / w.sum()


def make_stage2_batch(manifest: Manifest, cfg: ModelConfig, rng: np.random.Generator, batch_size: int,
                      store: ClipStore | None = None, weights: np.ndarray | None = None) -> list[ClipSample]:
    store = store or ClipStore(manifest, cfg)
    if weights is None:
        weights = class_weights(manifest)
    idx = rng.choice(len(manifest), size=batch_size, replace=True, p=weights)
    return [sample_clip(manifest.records[i], cfg, rng, cfg.augment_stage2, store) for i in idx]


def collate(samples: list[ClipSample]) -> Batch:
    return Batch(
        audio=torch.from_numpy(np.stack([s.audio for s in samples])),
        visual=torch.from_numpy(np.stack([s.visual for s in samples])),
        target=torch.tensor([s.target for s in samples], dtype=torch.long),
        clip_ids=[s.clip_id for s in samples],
        source_ids=[s.source_id for s in samples],
        offsets=[s.time_offset for s in samples],
    )


def split_by_source(manifest: Manifest, fraction: float, seed: int) -> tuple[Manifest, Manifest]:
    """Split off ``fraction`` of the source ids; returns ``(rest, held_out)``."""
    sources = sorted(manifest.sources())
    order = np.random.default_rng(seed).permutation(len(sources))
    n_held = int(round(fraction * len(sources)))
    held = {sources[i] for i in order[:n_held]}
    return (manifest.subset(lambda r: r.source_id not in held),
            manifest.subset(lambda r: r.source_id in held))


def compute_stats(manifest: Manifest, cfg: ModelConfig, store: ClipStore | None = None) -> Stats:
    """Corpus-wide scalar mean/std of log-mel values and of pixel values."""
    store = store or ClipStore(manifest, cfg)
    sums = np.zeros(4)
    counts = np.zeros(2)
    for rec in manifest:
        media = store.get(rec)
        for k, arr in enumerate((media.mel, media.frames)):
            a = arr.astype(np.float64)
            sums[2 * k] += a.sum()
            sums[2 * k + 1] += (a * a).sum()
            counts[k] += a.size
    mean_a, mean_v = sums[0] / counts[0], sums[2] / counts[1]
    std_a = math.sqrt(max(sums[1] / counts[0] - mean_a ** 2, 1e-12))
    std_v = math.sqrt(max(sums[3] / counts[1] - mean_v ** 2, 1e-12))
    return Stats(float(mean_a), float(std_a), float(mean_v), float(std_v))
