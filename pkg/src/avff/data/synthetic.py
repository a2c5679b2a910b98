"""Synthetic talking-face corpus with a controllable audio-visual correspondence.

Each real source has a latent driver ``z(t)`` (three random-phase sinusoids)
that renders both streams: the audio is a band of partials whose centre
frequency moves with ``z(t)``, and the video shows a mouth-like ellipse whose
opening tracks ``z(t)`` on a textured, face-like background. Fakes break the
link between the two streams:

* ``SYNTH-FA``   audio re-rendered from an independent driver
* ``SYNTH-FV``   visual re-rendered from an independent driver
* ``SYNTH-FAV``  both re-rendered from two independent drivers
* ``SYNTH-SWAP`` visual of one real source with the audio of another

Fakes reuse the identity (face texture, voice) of a real source and carry its
``source_id``, so source-level splits keep them with their origin.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..config import ModelConfig
from .manifest import SYNTH_CATEGORIES, Manifest, Record, Stats
from .sampling import ClipStore, compute_stats
from .tensorio import write_tensor

MOUTH_CENTER = (0.72, 0.5)   # (row, col) as a fraction of the frame size
MOUTH_HALF_WIDTH = 0.24
MOUTH_BOX = (0.55, 0.9, 0.2, 0.8)  # row0, row1, col0, col1 fractions used for measurement


@dataclass
class Driver:
    freqs: np.ndarray
    amps: np.ndarray
    phases: np.ndarray

    @classmethod
    def draw(cls, rng: np.random.Generator) -> "Driver":
        return cls(rng.uniform(0.3, 1.2, 3), rng.uniform(0.5, 1.0, 3), rng.uniform(0, 2 * np.pi, 3))

    def aperture(self, t: np.ndarray) -> np.ndarray:
        """Driver mapped to [0, 1]."""
        z = np.sin(2 * np.pi * self.freqs * np.asarray(t)[..., None] + self.phases) @ self.amps
        return 0.5 * (1.0 + z / self.amps.sum())


@dataclass
class Face:
    texture: np.ndarray   # (C, H, W) background in [0, 1]


@dataclass
class Voice:
    low_hz: float
    high_hz: float
    base_hz: float


def _smooth_field(rng: np.random.Generator, size: int, coarse: int = 4) -> np.ndarray:
    grid = rng.standard_normal((coarse, coarse))
    x = np.linspace(0, coarse - 1, size)
    i0 = np.clip(np.floor(x).astype(int), 0, coarse - 2)
    w = x - i0
    rows = grid[i0] * (1 - w)[:, None] + grid[i0 + 1] * w[:, None]
    return rows[:, i0] * (1 - w)[None, :] + rows[:, i0 + 1] * w[None, :]


def draw_face(rng: np.random.Generator, cfg: ModelConfig) -> Face:
    size, channels = cfg.visual_size, cfg.channels
    skin = rng.uniform(0.45, 0.85, channels)
    tex = skin[:, None, None] + 0.08 * np.stack([_smooth_field(rng, size) for _ in range(channels)])
    rows, cols = np.mgrid[0:size, 0:size] / size
    for cx in (0.3, 0.7):
        eye = np.exp(-(((rows - 0.35) / 0.06) ** 2 + ((cols - cx) / 0.08) ** 2))
        tex = tex - 0.35 * eye
    return Face(np.clip(tex, 0.0, 1.0).astype(np.float32))


def draw_voice(rng: np.random.Generator, cfg: ModelConfig) -> Voice:
    nyquist = cfg.audio_sample_rate / 2
    scale = rng.uniform(0.9, 1.1)
    return Voice(0.1 * nyquist * scale, 0.7 * nyquist * scale, rng.uniform(0.04, 0.07) * nyquist)


def render_frames(face: Face, driver: Driver, n_frames: int, cfg: ModelConfig,
                  rng: np.random.Generator, noise: float = 0.02) -> np.ndarray:
    size = cfg.visual_size
    t = (np.arange(n_frames) + 0.5) / cfg.visual_fps
    opening = driver.aperture(t)
    rows, cols = (np.mgrid[0:size, 0:size] + 0.5) / size
    half_h = (0.03 + 0.15 * opening)[:, None, None]
    dist = np.sqrt(((rows - MOUTH_CENTER[0]) / half_h) ** 2 + ((cols - MOUTH_CENTER[1]) / MOUTH_HALF_WIDTH) ** 2)
    alpha = 1.0 / (1.0 + np.exp(-8.0 * (1.0 - dist)))          # (n, H, W)
    lips = np.array([0.3, 0.05, 0.08] + [0.1] * max(0, cfg.channels - 3))[:cfg.channels]
    frames = face.texture[None] * (1 - alpha[:, None]) + lips[None, :, None, None] * alpha[:, None]
    frames = frames + noise * rng.standard_normal(frames.shape)
    return np.clip(frames, 0.0, 1.0).astype(np.float32)


def render_audio(voice: Voice, driver: Driver, n_samples: int, cfg: ModelConfig,
                 rng: np.random.Generator, noise: float = 0.05) -> np.ndarray:
    sr = cfg.audio_sample_rate
    t = np.arange(n_samples) / sr
    opening = driver.aperture(t)
    center = voice.low_hz * (voice.high_hz / voice.low_hz) ** opening
    envelope = 0.6 + 0.4 * opening
    wave = np.zeros(n_samples)
    for ratio, gain in ((0.85, 0.5), (1.0, 1.0), (1.18, 0.5)):
        phase = 2 * np.pi * np.cumsum(center * ratio) / sr + rng.uniform(0, 2 * np.pi)
        wave += gain * np.sin(phase)
    wave = envelope * wave + 0.3 * np.sin(2 * np.pi * voice.base_hz * t + rng.uniform(0, 2 * np.pi))
    wave += noise * rng.standard_normal(n_samples)
    return (0.25 * wave).astype(np.float32)


def _durations(rng: np.random.Generator, lo: float, hi: float, cfg: ModelConfig) -> float:
    n = int(math.ceil(rng.uniform(lo, hi) * cfg.visual_fps))
    return n / cfg.visual_fps


def generate_synthetic_corpus(n_real: int, n_fake_per_category: int, cfg: ModelConfig,
                              rng: np.random.Generator, out_dir: str | Path) -> Manifest:
    """Render the corpus into ``out_dir`` and write ``out_dir/manifest.tsv``."""
    if n_real < 2:
        raise ValueError("n_real must be >= 2 (SYNTH-SWAP needs two sources)")
    out_dir = Path(out_dir)
    media = out_dir / "media"
    media.mkdir(parents=True, exist_ok=True)
    T = cfg.clip_seconds
    extra = cfg.window_samples  # audio tail so the spectrogram spans the whole duration

    sources = []
    for i in range(n_real):
        sources.append(dict(
            id=f"src-{i:05d}", face=draw_face(rng, cfg), voice=draw_voice(rng, cfg),
            driver=Driver.draw(rng),
            duration=_durations(rng, 2 * T + cfg.slice_seconds, 2.5 * T, cfg)))

    records = []

    def emit(clip_id, label, category, src, duration, face, vdriver, voice, adriver):
        n_frames = int(round(duration * cfg.visual_fps))
        n_samples = int(round(duration * cfg.audio_sample_rate)) + extra
        audio_rel = f"media/{clip_id}.audio.avft"
        frames_rel = f"media/{clip_id}.frames.avft"
        write_tensor(out_dir / frames_rel, render_frames(face, vdriver, n_frames, cfg, rng))
        write_tensor(out_dir / audio_rel, render_audio(voice, adriver, n_samples, cfg, rng))
        records.append(Record(clip_id, audio_rel, frames_rel, label, category, src["id"], duration))

    for i, src in enumerate(sources):
        emit(f"real-{i:05d}", "real", "REAL", src, src["duration"],
             src["face"], src["driver"], src["voice"], src["driver"])

    for category in SYNTH_CATEGORIES:
        replace = n_fake_per_category > n_real
        picks = rng.choice(n_real, size=n_fake_per_category, replace=replace)
        tag = category.split("-")[1].lower()
        for j, i in enumerate(picks):
            src = sources[i]
            duration = _durations(rng, T, 1.5 * T, cfg)
            face, voice, drv = src["face"], src["voice"], src["driver"]
            if category == "SYNTH-FA":
                args = (face, drv, voice, Driver.draw(rng))
            elif category == "SYNTH-FV":
                args = (face, Driver.draw(rng), voice, drv)
            elif category == "SYNTH-FAV":
                args = (face, Driver.draw(rng), voice, Driver.draw(rng))
            else:
                other = sources[(i + 1 + int(rng.integers(n_real - 1))) % n_real]
                args = (face, drv, other["voice"], other["driver"])
            emit(f"{tag}-{j:05d}", "fake", category, src, duration, *args)

    manifest = Manifest(records, Stats(), out_dir)
    manifest.stats = compute_stats(manifest, cfg, ClipStore(manifest, cfg, cache=False))
    manifest.save(out_dir / "manifest.tsv")
    return manifest


# ---------------------------------------------------------------------------
# measurement helpers

def mouth_opening_series(frames: np.ndarray) -> np.ndarray:
    """Darkness of the mouth region per frame (larger = more open)."""
    _, _, h, w = frames.shape
    r0, r1, c0, c1 = MOUTH_BOX
    box = frames[:, :, int(r0 * h):int(math.ceil(r1 * h)), int(c0 * w):int(math.ceil(c1 * w))]
    return -box.mean(axis=(1, 2, 3))


def band_centroid_series(mel: np.ndarray) -> np.ndarray:
    power = np.exp(mel.astype(np.float64))
    bins = np.arange(mel.shape[1])
    return (power * bins).sum(axis=1) / power.sum(axis=1)


def driver_correlation(mel: np.ndarray, frames: np.ndarray, cfg: ModelConfig) -> float:
    """Pearson r between mouth opening and audio band centroid, on the frame clock."""
    centroid = band_centroid_series(mel)
    mel_t = (np.arange(len(centroid)) * cfg.hop_samples + cfg.window_samples / 2) / cfg.audio_sample_rate
    frame_t = (np.arange(len(frames)) + 0.5) / cfg.visual_fps
    keep = frame_t <= mel_t[-1]
    opening = mouth_opening_series(frames)[keep]
    centroid_at_frames = np.interp(frame_t[keep], mel_t, centroid)
    return float(np.corrcoef(opening, centroid_at_frames)[0, 1])
