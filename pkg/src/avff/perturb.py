"""Audio and visual corruptions at five severity levels for robustness tests.

Audio perturbations act on waveforms, before the log-mel front end.
"""
from __future__ import annotations

from typing import Callable

import numpy as np
from scipy import ndimage, signal

AUDIO_LEVELS = {
    "gaussian_noise": (40.0, 30.0, 20.0, 15.0, 10.0),      # SNR, dB
    "pitch_shift": (2.0, 4.0, 6.0, 8.0, 10.0),             # semitones, random sign
    "reverberance": (20.0, 40.0, 60.0, 80.0, 100.0),       # percent
    "compression": (320.0, 256.0, 192.0, 128.0, 64.0),     # kbit/s
}
AUDIO_KINDS = ("identity",) + tuple(AUDIO_LEVELS)

# compression proxy: kept fraction of the band and log-magnitude step (dB)
_BITRATE_CUTOFF = {320.0: 1.0, 256.0: 0.9, 192.0: 0.8, 128.0: 0.65, 64.0: 0.45}
_BITRATE_STEP_DB = {320.0: 0.5, 256.0: 1.0, 192.0: 1.5, 128.0: 2.5, 64.0: 4.0}

VISUAL_LEVELS = {
    "gaussian_noise": (0.02, 0.04, 0.08, 0.12, 0.2),   # noise std on [0, 1] pixels
    "blur": (0.5, 1.0, 1.5, 2.0, 3.0),                  # gaussian sigma, pixels
    "saturation": (0.8, 0.6, 0.4, 0.2, 0.0),            # 1 = unchanged, 0 = grayscale
    "contrast": (0.85, 0.7, 0.55, 0.4, 0.25),           # 1 = unchanged
}
VISUAL_KINDS = ("identity",) + tuple(VISUAL_LEVELS)


class PerturbationError(ValueError):
    pass


def _level_value(table: dict, kind: str, level: int, kinds: tuple) -> float | None:
    if kind not in kinds:
        raise PerturbationError(f"unknown perturbation {kind!r}; choose from {kinds}")
    if not isinstance(level, (int, np.integer)) or not 0 <= level <= 5:
        raise PerturbationError(f"level must be an integer in 0..5, got {level!r}")
    if kind == "identity" or level == 0:
        return None
    return table[kind][level - 1]


def snr_db(clean: np.ndarray, noisy: np.ndarray) -> float:
    clean = np.asarray(clean, np.float64)
    noise = np.asarray(noisy, np.float64) - clean
    return float(10 * np.log10(np.mean(clean ** 2) / np.mean(noise ** 2)))


def add_noise_at_snr(x: np.ndarray, snr: float, rng: np.random.Generator) -> np.ndarray:
    x64 = x.astype(np.float64)
    noise = rng.standard_normal(x.shape)
    noise -= noise.mean()
    target = np.mean(x64 ** 2) / 10 ** (snr / 10)
    noise *= np.sqrt(target / np.mean(noise ** 2))
    return (x64 + noise).astype(x.dtype)


def time_stretch(x: np.ndarray, rate: float, n_fft: int = 256) -> np.ndarray:
    """Phase-vocoder time stretch; ``rate > 1`` shortens the signal."""
    hop = n_fft // 4
    _, _, spec = signal.stft(x, nperseg=n_fft, noverlap=n_fft - hop, boundary="even")
    n_frames = spec.shape[1]
    steps = np.arange(0, n_frames - 1, rate)
    expected = np.pi * np.arange(spec.shape[0]) * hop / (n_fft / 2)
    phase = np.angle(spec[:, 0])
    out = np.empty((spec.shape[0], len(steps)), dtype=complex)
    for i, t in enumerate(steps):
        k = int(t)
        frac = t - k
        mag = (1 - frac) * np.abs(spec[:, k]) + frac * np.abs(spec[:, k + 1])
        out[:, i] = mag * np.exp(1j * phase)
        dphi = np.angle(spec[:, k + 1]) - np.angle(spec[:, k]) - expected
        dphi -= 2 * np.pi * np.round(dphi / (2 * np.pi))
        phase = phase + expected + dphi
    _, y = signal.istft(out, nperseg=n_fft, noverlap=n_fft - hop, boundary=True)
    return y


def pitch_shift(x: np.ndarray, semitones: float) -> np.ndarray:
    """Shift pitch by stretching in time by 2^(s/12) and resampling back."""
    factor = 2.0 ** (semitones / 12.0)
    stretched = time_stretch(x.astype(np.float64), 1.0 / factor)
    y = signal.resample(stretched, int(round(len(stretched) / factor)))
    y = np.pad(y, (0, max(0, len(x) - len(y))))[:len(x)]
    return y.astype(x.dtype)


def reverb(x: np.ndarray, amount: float, sample_rate: int, rng: np.random.Generator) -> np.ndarray:
    """Convolution with an exponentially decaying noise impulse response.

    ``amount`` in percent sets both the decay time (60 dB decay after
    ``amount / 100`` seconds) and the wet share of the mix.
    """
    rt60 = max(amount / 100.0, 1e-3)
    n = max(1, int(rt60 * sample_rate))
    t = np.arange(n) / sample_rate
    ir = rng.standard_normal(n) * np.exp(-6.9078 * t / rt60)
    ir[0] = 1.0
    ir /= np.sqrt(np.sum(ir ** 2))
    wet = signal.fftconvolve(x.astype(np.float64), ir)[:len(x)]
    mix = amount / 100.0 * 0.5
    y = (1 - mix) * x + mix * wet
    rms_in, rms_out = np.sqrt(np.mean(x.astype(np.float64) ** 2)), np.sqrt(np.mean(y ** 2))
    return (y * (rms_in / max(rms_out, 1e-12))).astype(x.dtype)


def compress(x: np.ndarray, bitrate_k: float, n_fft: int = 128) -> np.ndarray:
    """Lossy-codec stand-in: band-limit and quantize the log magnitude spectrum."""
    cutoff, step_db = _BITRATE_CUTOFF[bitrate_k], _BITRATE_STEP_DB[bitrate_k]
    _, _, spec = signal.stft(x.astype(np.float64), nperseg=n_fft)
    keep = int(np.ceil(cutoff * spec.shape[0]))
    spec[keep:] = 0
    mag_db = 20 * np.log10(np.abs(spec) + 1e-12)
    mag = 10 ** (np.round(mag_db / step_db) * step_db / 20)
    mag[np.abs(spec) == 0] = 0
    _, y = signal.istft(mag * np.exp(1j * np.angle(spec)), nperseg=n_fft)
    y = np.pad(y, (0, max(0, len(x) - len(y))))[:len(x)]
    return y.astype(x.dtype)


def perturb_audio(waveform: np.ndarray, kind: str, level: int, rng: np.random.Generator,
                  sample_rate: int = 16000) -> np.ndarray:
    value = _level_value(AUDIO_LEVELS, kind, level, AUDIO_KINDS)
    if value is None:
        return waveform.copy()
    if kind == "gaussian_noise":
        return add_noise_at_snr(waveform, value, rng)
    if kind == "pitch_shift":
        return pitch_shift(waveform, value * rng.choice((-1.0, 1.0)))
    if kind == "reverberance":
        return reverb(waveform, value, sample_rate, rng)
    return compress(waveform, value)


def perturb_frames(frames: np.ndarray, kind: str, level: int, rng: np.random.Generator) -> np.ndarray:
    """Corrupt ``(n, C, H, W)`` frames with values in [0, 1]."""
    value = _level_value(VISUAL_LEVELS, kind, level, VISUAL_KINDS)
    if value is None:
        return frames.copy()
    f = frames.astype(np.float64)
    if kind == "gaussian_noise":
        f = f + value * rng.standard_normal(f.shape)
    elif kind == "blur":
        f = ndimage.gaussian_filter(f, sigma=(0, 0, value, value))
    elif kind == "saturation":
        gray = f.mean(axis=1, keepdims=True)
        f = gray + value * (f - gray)
    else:
        mean = f.mean(axis=(1, 2, 3), keepdims=True)
        f = mean + value * (f - mean)
    return np.clip(f, 0.0, 1.0).astype(frames.dtype)


def audio_transform(kind: str, level: int, seed: int, sample_rate: int) -> Callable[[np.ndarray], np.ndarray]:
    """Waveform hook for :class:`ClipStore`; validated eagerly."""
    _level_value(AUDIO_LEVELS, kind, level, AUDIO_KINDS)
    rng = np.random.default_rng(seed)
    return lambda w: perturb_audio(w, kind, level, rng, sample_rate)
