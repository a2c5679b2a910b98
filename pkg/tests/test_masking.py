import warnings

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from avff.config import ModelConfig, preset
from avff.masking import (
    FusionError, MaskingError, apply_mask, draw_batch_masks, draw_complementary_masks,
    draw_random_masks, fuse, gather_slices, visible_slices,
)
from avff.tokenizer import slice_index


def test_complementary_pair():
    pair = draw_complementary_masks(ModelConfig(), np.random.default_rng(0))
    assert pair.masked_slice_count == 4
    assert (~pair.mask_a).sum() == (~pair.mask_v).sum() == 4
    assert np.all(pair.mask_a.astype(int) + pair.mask_v.astype(int) == 1)
    assert pair.complementary


def test_masks_reproducible():
    a = draw_complementary_masks(ModelConfig(), np.random.default_rng(3))
    b = draw_complementary_masks(ModelConfig(), np.random.default_rng(3))
    assert np.array_equal(a.mask_a, b.mask_a) and np.array_equal(a.mask_v, b.mask_v)


def test_audio_mask_frequency():
    rng = np.random.default_rng(1)
    counts = np.zeros(8)
    for _ in range(10_000):
        counts += ~draw_complementary_masks(ModelConfig(), rng).mask_a
    assert np.all(np.abs(counts / 10_000 - 0.5) <= 0.02)


def test_other_ratios():
    cfg = preset("desk", mask_ratio=0.25)
    with pytest.warns(UserWarning, match="disjoint"):
        pair = draw_complementary_masks(cfg, np.random.default_rng(0))
    assert not np.any(~pair.mask_a & ~pair.mask_v)
    assert (~pair.mask_a).sum() == 2 and not pair.complementary
    with pytest.raises(MaskingError):
        draw_complementary_masks(preset("desk", mask_ratio=0.75), np.random.default_rng(0))


def test_random_masks_are_not_complementary():
    rng = np.random.default_rng(0)
    pairs = [draw_random_masks(ModelConfig(), rng) for _ in range(50)]
    assert all((~p.mask_a).sum() == 4 for p in pairs)
    assert not all(p.complementary for p in pairs)


def test_apply_mask_desk_counts():
    emb = torch.randn(64, 5)
    mask = torch.tensor([1, 0, 1, 0, 1, 0, 1, 0], dtype=torch.bool)
    vis, pos = apply_mask(emb, slice_index(64, 8), mask)
    assert vis.shape == (32, 5) and pos.shape == (32,)
    assert sorted(torch.cat([pos, torch.tensor([i for i in range(64) if (i // 8) % 2 == 0])]).tolist()) \
        == list(range(64))
    assert torch.equal(vis, emb[[i for i in range(64) if (i // 8) % 2 == 0]])
    full, none = apply_mask(emb, slice_index(64, 8), torch.ones(8, dtype=torch.bool))
    assert torch.equal(full, emb) and none.numel() == 0


def _fusion_case(seed, b=3, k=8, tps=2, d=4):
    rng = np.random.default_rng(seed)
    cfg = ModelConfig()
    mask_a, mask_v = draw_batch_masks(cfg, rng, b)
    own = torch.randn(b, k * tps, d, dtype=torch.float64)
    vis_v = visible_slices(mask_v)
    cross = torch.randn(b, vis_v.shape[1], tps, d, dtype=torch.float64)
    return own, mask_a, mask_v, cross, vis_v


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_fusion_identity_and_substitution(seed):
    own, mask_a, _, cross, vis_v = _fusion_case(seed)
    fused = fuse(own, mask_a, cross, vis_v, 8)
    b, n, d = own.shape
    tps = n // 8
    for i in range(b):
        assert set(vis_v[i].tolist()) == set(torch.nonzero(~mask_a[i]).flatten().tolist())
        for j, s in enumerate(vis_v[i].tolist()):
            assert torch.equal(fused[i, s * tps:(s + 1) * tps], cross[i, j])
        for s in torch.nonzero(mask_a[i]).flatten().tolist():
            assert torch.equal(fused[i, s * tps:(s + 1) * tps], own[i, s * tps:(s + 1) * tps])


def test_fuse_all_visible_and_gap():
    own = torch.randn(2, 16, 4)
    ones = torch.ones(2, 8, dtype=torch.bool)
    empty = torch.zeros(2, 0, 2, 4)
    assert torch.equal(fuse(own, ones, empty, torch.zeros(2, 0, dtype=torch.long), 8), own)
    mask = ones.clone()
    mask[:, 3] = False
    with pytest.raises(FusionError, match="without cross-modal"):
        fuse(own, mask, empty, torch.zeros(2, 0, dtype=torch.long), 8)
    filled = fuse(own, mask, empty, torch.zeros(2, 0, dtype=torch.long), 8, fill=torch.full((4,), 7.0))
    assert torch.all(filled[:, 6:8] == 7.0)


def test_fusion_gradient_is_replacement():
    own, mask_a, _, cross, vis_v = _fusion_case(0)
    own.requires_grad_(True)
    cross.requires_grad_(True)
    fuse(own, mask_a, cross, vis_v, 8).sum().backward()
    token_visible = mask_a[:, slice_index(16, 8)]
    assert torch.all(own.grad[~token_visible] == 0)
    assert torch.all(own.grad[token_visible] == 1)
    assert torch.all(cross.grad == 1)


def test_gather_slices():
    emb = torch.arange(2 * 8 * 3, dtype=torch.float32).reshape(2, 8, 3)
    out = gather_slices(emb, torch.tensor([[3, 0], [1, 2]]), 4)
    assert torch.equal(out[0, 0], emb[0, 6:8]) and torch.equal(out[1, 1], emb[1, 4:6])
