from __future__ import annotations

from functools import lru_cache

import numpy as np

from ..config import ModelConfig

LOG_FLOOR = 1e-6


class AudioInputError(ValueError):
    pass


def hz_to_mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=16)
def mel_filterbank(sample_rate: int, n_fft: int, n_mels: int) -> np.ndarray:
    """Triangular HTK-mel filters, shape ``(n_fft // 2 + 1, n_mels)``."""
    freqs = np.linspace(0.0, sample_rate / 2, n_fft // 2 + 1)
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2), n_mels + 2))
    lower, center, upper = edges[:-2], edges[1:-1], edges[2:]
    rising = (freqs[:, None] - lower) / (center - lower)
    falling = (upper - freqs[:, None]) / (upper - center)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    fb.setflags(write=False)
    return fb


def frame_count(n_samples: int, window: int, hop: int) -> int:
    return (n_samples - window) // hop + 1


def stft_magnitude(waveform: np.ndarray, window: int, hop: int, n_fft: int) -> np.ndarray:
    frames = np.lib.stride_tricks.sliding_window_view(waveform, window)[::hop]
    return np.abs(np.fft.rfft(frames * np.hamming(window), n=n_fft, axis=-1))


def log_mel(waveform: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """Log-mel spectrogram, shape ``(frames, mel_bins)``.

    Hamming-windowed STFT magnitude (no centre padding, so
    ``frames = (len - win) // hop + 1``), projected on ``cfg.mel_bins``
    triangular filters and log-compressed with a floor of ``1e-6``.
    """
    waveform = np.asarray(waveform, dtype=np.float64)
    if waveform.ndim != 1:
        raise AudioInputError(f"waveform must be 1-D, got shape {waveform.shape}")
    win, hop = cfg.window_samples, cfg.hop_samples
    if waveform.size < win:
        raise AudioInputError(f"waveform has {waveform.size} samples, shorter than one window ({win})")
    n_fft = 1 << (win - 1).bit_length()
    mag = stft_magnitude(waveform, win, hop, n_fft)
    mel = mag @ mel_filterbank(cfg.audio_sample_rate, n_fft, cfg.mel_bins)
    return np.log(np.maximum(mel, LOG_FLOOR)).astype(np.float32)


def fit_frames(spec: np.ndarray, n_frames: int) -> np.ndarray:
    """Centre-crop or right-pad (with ``log(1e-6)``) to exactly ``n_frames``."""
    have = spec.shape[0]
    if have >= n_frames:
        start = (have - n_frames) // 2
        return spec[start:start + n_frames]
    pad = np.full((n_frames - have,) + spec.shape[1:], np.log(LOG_FLOOR), dtype=spec.dtype)
    return np.concatenate([spec, pad], axis=0)
