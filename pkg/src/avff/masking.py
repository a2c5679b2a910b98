"""Complementary slice masking and cross-modal fusion.

Mask convention: ``True``/1 = visible, ``False``/0 = masked, one entry per
temporal slice. Batched masks have shape ``(B, K)``.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import torch

from .config import ModelConfig


class MaskingError(ValueError):
    pass


class FusionError(RuntimeError):
    pass


@dataclass(frozen=True)
class SliceMaskPair:
    mask_a: np.ndarray
    mask_v: np.ndarray
    masked_slice_count: int

    @property
    def complementary(self) -> bool:
        return bool(np.all(self.mask_a ^ self.mask_v))


def _check_ratio(cfg: ModelConfig) -> int:
    m = cfg.masked_slices
    if 2 * m > cfg.num_slices:
        raise MaskingError(
            f"complementary masking needs mask_ratio <= 0.5 (masked slices of one modality must be "
            f"visible in the other); got {cfg.mask_ratio}")
    if 2 * m != cfg.num_slices:
        warnings.warn(f"mask_ratio {cfg.mask_ratio} != 0.5: masks are disjoint, not complementary",
                      stacklevel=3)
    return m


def draw_complementary_masks(cfg: ModelConfig, rng: np.random.Generator) -> SliceMaskPair:
    """Audio masked on a random subset S, visual masked on slices outside S.

    At mask_ratio 0.5 every slice is masked in exactly one modality. At lower
    ratios the visual mask is drawn from the complement of S, so masked slices
    of either modality are always visible in the other.
    """
    m = _check_ratio(cfg)
    k = cfg.num_slices
    order = rng.permutation(k)
    mask_a = np.ones(k, dtype=bool)
    mask_v = np.ones(k, dtype=bool)
    mask_a[order[:m]] = False
    mask_v[order[k - m:]] = False
    return SliceMaskPair(mask_a, mask_v, m)


def draw_random_masks(cfg: ModelConfig, rng: np.random.Generator) -> SliceMaskPair:
    """Independent masks per modality (the non-complementary ablation)."""
    k, m = cfg.num_slices, cfg.masked_slices
    mask_a = np.ones(k, dtype=bool)
    mask_v = np.ones(k, dtype=bool)
    mask_a[rng.permutation(k)[:m]] = False
    mask_v[rng.permutation(k)[:m]] = False
    return SliceMaskPair(mask_a, mask_v, m)


def draw_batch_masks(cfg: ModelConfig, rng: np.random.Generator, batch: int,
                     complementary: bool = True) -> tuple[torch.Tensor, torch.Tensor]:
    """One fresh mask pair per sample, stacked to ``(B, K)`` bool tensors."""
    draw = draw_complementary_masks if complementary else draw_random_masks
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        pairs = [draw(cfg, rng) for _ in range(batch)]
    return (torch.from_numpy(np.stack([p.mask_a for p in pairs])),
            torch.from_numpy(np.stack([p.mask_v for p in pairs])))


def token_mask(mask: torch.Tensor, slice_indices: torch.Tensor) -> torch.Tensor:
    """Per-slice mask ``(..., K)`` -> per-token mask ``(..., N)``."""
    return mask[..., slice_indices]


def apply_mask(embeddings: torch.Tensor, slice_indices: torch.Tensor,
               mask: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Split ``(B, N, d)`` embeddings into visible tokens and masked positions.

    Returns ``visible`` of shape ``(B, n_visible, d)`` (original order) and the
    removed token indices ``(B, n_masked)``. Every row must keep the same
    number of tokens, which holds for fixed-ratio slice masks.
    """
    unbatched = embeddings.dim() == 2
    if unbatched:
        embeddings, mask = embeddings[None], mask[None]
    keep = token_mask(torch.as_tensor(mask, dtype=torch.bool), slice_indices)
    n_vis = keep.sum(dim=1)
    if not torch.all(n_vis == n_vis[0]):
        raise MaskingError("rows keep different numbers of tokens")
    order = torch.argsort((~keep).to(torch.int8), dim=1, stable=True)
    n = int(n_vis[0])
    vis_idx, msk_idx = order[:, :n], order[:, n:]
    visible = torch.gather(embeddings, 1, vis_idx[..., None].expand(-1, -1, embeddings.shape[-1]))
    if unbatched:
        return visible[0], msk_idx[0]
    return visible, msk_idx


def visible_slices(mask: torch.Tensor) -> torch.Tensor:
    """Indices of visible slices per row, ``(B, n_visible_slices)``."""
    counts = mask.sum(dim=1)
    if not torch.all(counts == counts[0]):
        raise MaskingError("rows have different numbers of visible slices")
    order = torch.argsort((~mask).to(torch.int8), dim=1, stable=True)
    return order[:, :int(counts[0])]


def gather_slices(embeddings: torch.Tensor, slices: torch.Tensor, num_slices: int) -> torch.Tensor:
    """``(B, N, d)`` -> ``(B, n, tokens_per_slice, d)`` for the listed slices."""
    b, n, d = embeddings.shape
    grid = embeddings.reshape(b, num_slices, n // num_slices, d)
    idx = slices[:, :, None, None].expand(-1, -1, n // num_slices, d)
    return torch.gather(grid, 1, idx)


def fuse(own: torch.Tensor, own_mask: torch.Tensor, cross_tokens: torch.Tensor,
         cross_slices: torch.Tensor, num_slices: int, fill: torch.Tensor | None = None) -> torch.Tensor:
    """Replace the masked slices of ``own`` by cross-modal slices of the same index.

    ``own``: ``(B, N, d)`` temporal-major embeddings; ``own_mask``: ``(B, K)``;
    ``cross_tokens``: ``(B, n, tokens_per_slice, d)`` carrying slice ids
    ``cross_slices`` ``(B, n)``. Visible slices pass through unchanged; masked
    slices take the cross-modal tokens verbatim. A masked slice without a
    cross-modal counterpart is an error unless ``fill`` (a ``(d,)`` learnable
    token) is given, in which case it is filled with that token.
    """
    b, n, d = own.shape
    tps = n // num_slices
    grid = own.reshape(b, num_slices, tps, d)
    visible = own_mask.to(torch.bool)
    covered = torch.zeros(b, num_slices, dtype=torch.bool)
    if cross_tokens.shape[1]:
        covered = covered.scatter(1, cross_slices, True)
        index = cross_slices[:, :, None, None].expand(-1, -1, tps, d)
        cross_grid = torch.zeros_like(grid).scatter(1, index, cross_tokens.to(grid.dtype))
    else:
        cross_grid = torch.zeros_like(grid)
    gap = ~visible & ~covered
    if gap.any():
        if fill is None:
            rows, cols = torch.nonzero(gap, as_tuple=True)
            raise FusionError(f"masked slices without cross-modal tokens: "
                              f"{list(zip(rows.tolist(), cols.tolist()))[:8]}")
        cross_grid = torch.where(gap[:, :, None, None], fill.expand_as(grid), cross_grid)
    fused = torch.where(visible[:, :, None, None], grid, cross_grid)
    return fused.reshape(b, n, d)
