import math
import warnings

import numpy as np
import pytest

from avff.config import ModelConfig, preset
from avff.data.audio import LOG_FLOOR, AudioInputError, fit_frames, frame_count, log_mel
from avff.data.manifest import Manifest, ManifestError, Record, Stats, load_manifest
from avff.data.sampling import (
    ClipStore, IngestionError, audio_frame_start, class_weights, collate, compute_stats,
    make_stage1_batch, make_stage2_batch, sample_clip, split_by_source, visual_frame_indices,
)
from avff.data.synthetic import driver_correlation, generate_synthetic_corpus
from avff.data.tensorio import TensorFileError, read_tensor, write_tensor


# -- tensor files -------------------------------------------------------------

def test_tensor_round_trip(tmp_path):
    arr = np.random.default_rng(0).standard_normal((3, 4, 5)).astype(np.float32)
    write_tensor(tmp_path / "x.avft", arr)
    raw = (tmp_path / "x.avft").read_bytes()
    assert raw[:4] == b"AVFT" and len(raw) == 16 + 4 * 3 + 4 * arr.size
    assert np.array_equal(read_tensor(tmp_path / "x.avft"), arr)


def test_tensor_corrupt(tmp_path):
    write_tensor(tmp_path / "x.avft", np.zeros(6))
    raw = (tmp_path / "x.avft").read_bytes()
    (tmp_path / "bad.avft").write_bytes(b"XXXX" + raw[4:])
    (tmp_path / "short.avft").write_bytes(raw[:-4])
    for name in ("bad.avft", "short.avft"):
        with pytest.raises(TensorFileError):
            read_tensor(tmp_path / name)


# -- manifest -------------------------------------------------------------------

def _record(i, label="real", **kw):
    return Record(**{**dict(clip_id=f"c{i}", audio_path=f"a{i}", frames_path=f"f{i}", label=label,
                            category="REAL", source_id=f"s{i}", duration_s=4.0), **kw})


def test_manifest_validation():
    with pytest.raises(ManifestError, match="duplicate"):
        Manifest([_record(1), _record(1)])
    with pytest.raises(ManifestError, match="label"):
        Manifest([_record(1, label="maybe")])
    with pytest.raises(ManifestError, match="duration"):
        Manifest([_record(1, duration_s=0.0)])


def test_manifest_file_round_trip(tmp_path):
    m = Manifest([_record(1), _record(2, label="fake", category="SYNTH-FA")], Stats(1.5, 2.0, 0.25, 0.5), tmp_path)
    m.save(tmp_path / "m.tsv")
    text = (tmp_path / "m.tsv").read_text().splitlines()
    assert text[0] == "#avff-manifest v1" and text[1].startswith("#stats")
    loaded = load_manifest(tmp_path / "m.tsv", check_paths=False)
    assert loaded.records == m.records and loaded.stats == m.stats
    with pytest.raises(ManifestError, match="unresolvable"):
        load_manifest(tmp_path / "m.tsv")


def test_manifest_malformed(tmp_path):
    (tmp_path / "m.tsv").write_text("#avff-manifest v1\nc1\ta\tb\treal\n")
    with pytest.raises(ManifestError, match="7 tab-separated"):
        load_manifest(tmp_path / "m.tsv", check_paths=False)
    (tmp_path / "n.tsv").write_text("no header\n")
    with pytest.raises(ManifestError, match="header"):
        load_manifest(tmp_path / "n.tsv", check_paths=False)


# -- log-mel ----------------------------------------------------------------------

def _oracle_log_mel(x, sr, win, hop, n_mels):
    """Explicit DFT sums and a loop-built triangular filterbank."""
    n_fft = 1
    while n_fft < win:
        n_fft *= 2
    n_frames = (len(x) - win) // hop + 1
    w = np.array([0.54 - 0.46 * math.cos(2 * math.pi * n / (win - 1)) for n in range(win)])
    n = np.arange(win)
    k = np.arange(n_fft // 2 + 1)
    basis = np.exp(-2j * np.pi * np.outer(k, n) / n_fft)
    mags = np.array([np.abs(basis @ (x[f * hop:f * hop + win] * w)) for f in range(n_frames)])

    def mel(f):
        return 2595 * math.log10(1 + f / 700)

    def hz(m):
        return 700 * (10 ** (m / 2595) - 1)

    top = mel(sr / 2)
    edges = [hz(top * i / (n_mels + 1)) for i in range(n_mels + 2)]
    fb = np.zeros((len(k), n_mels))
    for j in range(n_mels):
        lo, c, hi = edges[j], edges[j + 1], edges[j + 2]
        for i in k:
            f = i * sr / n_fft
            if lo < f <= c:
                fb[i, j] = (f - lo) / (c - lo)
            elif c < f < hi:
                fb[i, j] = (hi - f) / (hi - c)
    return np.log(np.maximum(mags @ fb, 1e-6))


def test_log_mel_matches_dft_oracle():
    cfg = preset("tiny")
    x = np.random.default_rng(1).standard_normal(700)
    got = log_mel(x, cfg)
    want = _oracle_log_mel(x, cfg.audio_sample_rate, cfg.window_samples, cfg.hop_samples, cfg.mel_bins)
    assert got.shape == want.shape
    np.testing.assert_allclose(got, want, atol=2e-4)


def test_log_mel_default_frame_count():
    cfg = ModelConfig()
    x = np.random.default_rng(0).standard_normal(int(3.2 * 16000)).astype(np.float32)
    mel = log_mel(x, cfg)
    assert mel.shape == (797, 128) == (frame_count(len(x), 256, 64), 128)
    fitted = fit_frames(mel, 768)
    assert fitted.shape == (768, 128)
    assert np.array_equal(fitted, mel[14:782])


def test_log_mel_silence_and_tone():
    cfg = ModelConfig()
    assert np.all(log_mel(np.zeros(4000), cfg) == np.float32(np.log(LOG_FLOOR)))
    t = np.arange(16000) / 16000
    mel = log_mel(np.sin(2 * np.pi * 440 * t), cfg)
    peaks = mel.argmax(axis=1)
    assert np.all(peaks == peaks[0])
    with pytest.raises(AudioInputError):
        log_mel(np.zeros(100), cfg)


def test_fit_frames_pads_with_floor():
    spec = np.zeros((3, 4), np.float32)
    out = fit_frames(spec, 5)
    assert out.shape == (5, 4) and np.all(out[3:] == np.float32(np.log(LOG_FLOOR)))


# -- synthetic corpus ---------------------------------------------------------------

def test_corpus_layout(small_corpus):
    cats = small_corpus.categories
    assert cats == ["REAL", "SYNTH-FA", "SYNTH-FAV", "SYNTH-FV", "SYNTH-SWAP"]
    for rec in small_corpus:
        assert rec.is_fake == (rec.category != "REAL")
    sources = {r.source_id for r in small_corpus if not r.is_fake}
    assert {r.source_id for r in small_corpus} == sources


def test_corpus_driver_correlation(small_corpus, tiny):
    store = ClipStore(small_corpus, tiny)
    r = {c: [] for c in small_corpus.categories}
    for rec in small_corpus:
        media = store.get(rec)
        r[rec.category].append(driver_correlation(media.mel, media.frames, tiny))
    assert min(r["REAL"]) > 0.9
    assert abs(np.mean(r["SYNTH-SWAP"])) < 0.3
    assert np.mean(r["REAL"]) > np.mean(r["SYNTH-SWAP"])


def test_corpus_deterministic(tmp_path, tiny):
    for name in ("a", "b"):
        generate_synthetic_corpus(3, 1, tiny, np.random.default_rng(9), tmp_path / name)
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    for rel in files:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()
    with pytest.raises(ValueError):
        generate_synthetic_corpus(1, 1, tiny, np.random.default_rng(0), tmp_path / "c")


def test_stats_header(small_corpus, tiny):
    s = compute_stats(small_corpus, tiny)
    assert s == small_corpus.stats or np.allclose(
        [s.mean_a, s.std_a, s.mean_v, s.std_v],
        [small_corpus.stats.mean_a, small_corpus.stats.std_a, small_corpus.stats.mean_v, small_corpus.stats.std_v])


# -- sampling ------------------------------------------------------------------------

def test_visual_frame_quartiles():
    cfg = ModelConfig()
    idx = visual_frame_indices(0.0, cfg)
    slice_len = cfg.slice_seconds
    want = [math.floor((i * slice_len + q * slice_len) * cfg.visual_fps + 1e-6)
            for i in range(8) for q in (0.25, 0.75)]
    assert idx.tolist() == want
    assert audio_frame_start(1.0, cfg) == 250


def test_sample_clip_shapes_and_determinism(small_corpus, tiny):
    store = ClipStore(small_corpus, tiny)
    rec = small_corpus.records[0]
    a = sample_clip(rec, tiny, np.random.default_rng(4), store=store)
    b = sample_clip(rec, tiny, np.random.default_rng(4), store=store)
    assert a.audio.shape == (tiny.audio_frames, tiny.mel_bins)
    assert a.visual.shape == (tiny.visual_frames, 3, tiny.visual_size, tiny.visual_size)
    assert a.audio.tobytes() == b.audio.tobytes() and a.visual.tobytes() == b.visual.tobytes()
    assert np.isfinite(a.audio).all() and np.isfinite(a.visual).all()


def test_short_clip_padding(tmp_path, tiny):
    sr = tiny.audio_sample_rate
    write_tensor(tmp_path / "a.avft", 0.1 * np.random.default_rng(0).standard_normal(int(1.6 * sr) + 200))
    frames = np.random.default_rng(1).random((8, 3, 16, 16)).astype(np.float32)
    write_tensor(tmp_path / "f.avft", frames)
    m = Manifest([Record("c", "a.avft", "f.avft", "real", "REAL", "s", 1.6)], Stats(), tmp_path)
    store = ClipStore(m, tiny)
    s = sample_clip(m.records[0], tiny, np.random.default_rng(0), store=store)
    assert s.time_offset == 0.0
    assert np.all(s.audio[-10:] == np.float32(np.log(LOG_FLOOR)))
    assert np.array_equal(s.visual[-1], frames[-1]) and np.array_equal(s.visual[-2], frames[-1])


def test_ingestion_errors(tmp_path, tiny):
    write_tensor(tmp_path / "a.avft", np.zeros(4000))
    write_tensor(tmp_path / "f.avft", np.zeros((16, 3, 8, 8)))
    m = Manifest([Record("c", "a.avft", "f.avft", "real", "REAL", "s", 3.2),
                  Record("d", "a.avft", "missing.avft", "real", "REAL", "s", 3.2)], Stats(), tmp_path)
    store = ClipStore(m, tiny)
    with pytest.raises(IngestionError, match="c: expected frames"):
        store.get(m.records[0])
    with pytest.raises(IngestionError, match="d: cannot read"):
        store.get(m.records[1])


def test_stage1_batch_pairs(small_corpus, tiny):
    reals = small_corpus.subset(lambda r: not r.is_fake)
    store = ClipStore(reals, tiny)
    rng = np.random.default_rng(0)
    batch = make_stage1_batch(reals, tiny, rng, 4, store)
    assert len(batch) == 4
    for first, second in (batch[0:2], batch[2:4]):
        assert first.source_id == second.source_id and first.time_offset != second.time_offset
    gaps = []
    for _ in range(200):
        b = make_stage1_batch(reals, tiny, rng, 2, store)
        gaps.append(abs(b[0].time_offset - b[1].time_offset))
    assert min(gaps) >= tiny.slice_seconds - 1e-9
    with pytest.raises(ValueError):
        make_stage1_batch(small_corpus, tiny, rng, 4)
    with pytest.raises(ValueError):
        make_stage1_batch(reals, tiny, rng, 3, store)


def test_stage1_single_source(small_corpus, tiny):
    one = small_corpus.subset(lambda r: r.clip_id == "real-00000")
    b = make_stage1_batch(one, tiny, np.random.default_rng(1), 6)
    assert len({s.source_id for s in b}) == 1
    assert all(b[i].time_offset != b[i + 1].time_offset for i in range(0, 6, 2))


def test_class_weights_inverse_frequency():
    recs = [_record(i) for i in range(500)] + [_record(1000 + i, label="fake") for i in range(19500)]
    w = class_weights(Manifest(recs))
    assert w[0] / w[-1] == pytest.approx(39.0)
    assert np.allclose(class_weights(Manifest([_record(1), _record(2, label="fake")])), 0.5)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        assert np.allclose(class_weights(Manifest([_record(1), _record(2)])), 0.5)
    assert caught


def test_stage2_balance(small_corpus, tiny):
    store = ClipStore(small_corpus, tiny)
    w = class_weights(small_corpus)
    rng = np.random.default_rng(0)
    labels = np.array([small_corpus.records[i].target for i in rng.choice(len(small_corpus), 10000, p=w)])
    assert 0.47 <= 1 - labels.mean() <= 0.53
    batch = collate(make_stage2_batch(small_corpus, tiny, rng, 8, store, w))
    assert batch.audio.shape[0] == 8 and set(batch.target.tolist()) <= {0, 1}


def test_split_by_source(small_corpus):
    rest, held = split_by_source(small_corpus, 0.3, 5)
    assert not set(rest.sources()) & set(held.sources())
    assert len(rest) + len(held) == len(small_corpus)
    again = split_by_source(small_corpus, 0.3, 5)[1]
    assert [r.clip_id for r in again] == [r.clip_id for r in held]
