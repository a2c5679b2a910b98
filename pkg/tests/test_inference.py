import numpy as np
import pytest
import torch

from avff.data.sampling import ClipMedia, ClipStore
from avff.inference import (
    MissingModalityError, block_count, block_offsets, clip_blocks, infer_clip, infer_manifest, summarize,
)
from avff.training import build_model


def enumerate_blocks(duration, cfg):
    """Count windows [s, s + T] with s on the T/K grid that fit inside the clip."""
    if duration < cfg.clip_seconds:
        return 1
    step = cfg.clip_seconds / cfg.num_slices
    n = 0
    while n * step + cfg.clip_seconds <= duration + 1e-9:
        n += 1
    return n


def test_reference_counts(tiny):
    t = tiny.clip_seconds
    assert block_count(2 * t, tiny) == 9
    assert block_count(t, tiny) == 1
    assert block_count(1.5 * t, tiny) == 5
    assert block_count(0.4 * t, tiny) == 1
    assert block_offsets(2 * t, tiny)[-1] == pytest.approx(t)


def test_random_durations(tiny):
    rng = np.random.default_rng(0)
    for d in rng.uniform(0.1, 6 * tiny.clip_seconds, 100):
        assert block_count(d, tiny) == enumerate_blocks(d, tiny)


def test_missing_modality(tiny, small_corpus):
    store = ClipStore(small_corpus, tiny)
    media = store.get(small_corpus.records[0])
    with pytest.raises(MissingModalityError):
        clip_blocks(ClipMedia(media.mel[:0], media.frames, media.duration), tiny, store.stats)
    with pytest.raises(MissingModalityError):
        clip_blocks(ClipMedia(media.mel, media.frames[:0], media.duration), tiny, store.stats)


def test_clip_score_is_mean_of_block_logits(tiny, small_corpus):
    model = build_model(tiny).eval()
    store = ClipStore(small_corpus, tiny)
    rec = max(small_corpus, key=lambda r: r.duration_s)
    media = store.get(rec)
    logits, n = infer_clip(media, model, tiny, store.stats, chunk=2)
    audio, visual = clip_blocks(media, tiny, store.stats)
    assert n == len(audio) == block_count(media.duration, tiny) > 1
    with torch.no_grad():
        want = model(audio, visual).double().mean(0).numpy()
    np.testing.assert_allclose(logits, want, rtol=1e-5, atol=1e-6)


def test_manifest_rows(tiny, small_corpus):
    subset = small_corpus.subset(lambda r: r.source_id in sorted(small_corpus.sources())[:4])
    rows = infer_manifest(subset, build_model(tiny), tiny)
    assert [r.clip_id for r in rows] == sorted(r.clip_id for r in subset)
    for r in rows:
        assert 0 <= r.score <= 1 and r.prediction == int(r.score >= 0.5)
    m = summarize(rows)
    assert m["n"] == len(rows) and 0 <= m["acc"] <= 1
