"""Non-overlapping patch tokenization with temporal-major token order.

Tokens are laid out slice by slice (all tokens of slice 0, then slice 1, ...),
so selecting the tokens of a temporal slice is a contiguous range. Leading
batch dimensions are passed through unchanged.
"""
from __future__ import annotations

import torch

from .config import ModelConfig, derive_geometry


class ShapeError(ValueError):
    pass


def _check(x: torch.Tensor, expected: tuple[int, ...], what: str) -> None:
    actual = tuple(x.shape[-len(expected):]) if x.dim() >= len(expected) else tuple(x.shape)
    if actual != expected:
        raise ShapeError(f"{what}: expected trailing dims {expected}, got {tuple(x.shape)}")


def slice_index(n_tokens: int, num_slices: int) -> torch.Tensor:
    return torch.arange(n_tokens) // (n_tokens // num_slices)


def patchify_audio(spec: torch.Tensor, cfg: ModelConfig) -> tuple[torch.Tensor, torch.Tensor]:
    """``(..., T_a, L)`` -> tokens ``(..., N_a, pt*pf)`` and slice ids ``(N_a,)``."""
    _check(spec, (cfg.audio_frames, cfg.mel_bins), "audio")
    pt, pf = cfg.audio_patch
    tb, fb = cfg.audio_frames // pt, cfg.mel_bins // pf
    lead = spec.shape[:-2]
    n = len(lead)
    x = spec.reshape(*lead, tb, pt, fb, pf)
    x = x.permute(*range(n), n, n + 2, n + 1, n + 3)
    tokens = x.reshape(*lead, tb * fb, pt * pf)
    return tokens, slice_index(tb * fb, cfg.num_slices)


def unpatchify_audio(tokens: torch.Tensor, cfg: ModelConfig) -> torch.Tensor:
    geo = derive_geometry(cfg)
    _check(tokens, (geo.audio_tokens_total, geo.patch_dim_audio), "audio tokens")
    pt, pf = cfg.audio_patch
    tb, fb = geo.audio_grid
    lead = tokens.shape[:-2]
    n = len(lead)
    x = tokens.reshape(*lead, tb, fb, pt, pf)
    x = x.permute(*range(n), n, n + 2, n + 1, n + 3)
    return x.reshape(*lead, cfg.audio_frames, cfg.mel_bins)


def patchify_visual(frames: torch.Tensor, cfg: ModelConfig) -> tuple[torch.Tensor, torch.Tensor]:
    """``(..., T_v, C, H, W)`` -> tokens ``(..., N_v, pd*ph*pw*C)`` and slice ids."""
    s = cfg.visual_size
    _check(frames, (cfg.visual_frames, cfg.channels, s, s), "visual")
    pd, ph, pw = cfg.visual_patch
    tb, hb, wb = cfg.visual_frames // pd, s // ph, s // pw
    lead = frames.shape[:-4]
    n = len(lead)
    x = frames.reshape(*lead, tb, pd, cfg.channels, hb, ph, wb, pw)
    # -> (tb, hb, wb, pd, ph, pw, C)
    x = x.permute(*range(n), n, n + 3, n + 5, n + 1, n + 4, n + 6, n + 2)
    tokens = x.reshape(*lead, tb * hb * wb, pd * ph * pw * cfg.channels)
    return tokens, slice_index(tb * hb * wb, cfg.num_slices)


def unpatchify_visual(tokens: torch.Tensor, cfg: ModelConfig) -> torch.Tensor:
    geo = derive_geometry(cfg)
    _check(tokens, (geo.visual_tokens_total, geo.patch_dim_visual), "visual tokens")
    pd, ph, pw = cfg.visual_patch
    tb, hb, wb = geo.visual_grid
    lead = tokens.shape[:-2]
    n = len(lead)
    x = tokens.reshape(*lead, tb, hb, wb, pd, ph, pw, cfg.channels)
    # (tb, hb, wb, pd, ph, pw, C) -> (tb, pd, C, hb, ph, wb, pw)
    x = x.permute(*range(n), n, n + 3, n + 6, n + 1, n + 4, n + 2, n + 5)
    return x.reshape(*lead, cfg.visual_frames, cfg.channels, cfg.visual_size, cfg.visual_size)
