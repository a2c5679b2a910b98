import numpy as np
import pytest

from avff.data.sampling import ClipStore
from avff.evaluation import (
    ProtocolError, auc_drop, export_embeddings, intra_split, perturbation_sweep, run_protocol, write_results,
)
from avff.training import build_model


@pytest.fixture(scope="module")
def quick(tiny_module):
    return tiny_module.replace(stage2_epochs=1)


@pytest.fixture(scope="module")
def tiny_module():
    from avff.config import preset
    return preset("tiny")


def test_intra_split(small_corpus):
    train, test = intra_split(small_corpus, 0)
    assert set(train.sources()).isdisjoint(test.sources())
    assert len(train) + len(test) == len(small_corpus)
    again = intra_split(small_corpus, 0)
    assert [r.clip_id for r in again[1]] == [r.clip_id for r in test]
    assert 0.2 < len(test.sources()) / len(small_corpus.sources()) < 0.4


def test_loco_rows(small_corpus, quick, tmp_path):
    store = ClipStore(small_corpus, quick)
    results = run_protocol(small_corpus, quick, "leave-one-category-out", tmp_path, store=store)
    names = [r.name for r in results]
    assert names == ["SYNTH-FA", "SYNTH-FAV", "SYNTH-FV", "SYNTH-SWAP", "AVG-FV"]
    for r in results[:4]:
        assert {row.category for row in r.rows} == {"REAL", r.name}
    fv = [r for r in results if r.name in ("SYNTH-FV", "SYNTH-FAV")]
    assert results[-1].metrics["auc"] == pytest.approx(np.mean([r.metrics["auc"] for r in fv]))
    write_results(results, tmp_path / "out")
    lines = (tmp_path / "out" / "eval_metrics.tsv").read_text().splitlines()
    assert len(lines) == 6 and "leave-one-category-out:AVG-FV" in lines[-1]
    assert (tmp_path / "out" / "clips_leave-one-category-out_SYNTH-FA.tsv").exists()


def test_protocol_errors(small_corpus, quick, tmp_path):
    with pytest.raises(ProtocolError):
        run_protocol(small_corpus, quick, "k-fold", tmp_path)
    with pytest.raises(ProtocolError):
        run_protocol(small_corpus, quick, "cross-corpus", tmp_path)
    one_fake = small_corpus.subset(lambda r: r.category in ("REAL", "SYNTH-FA"))
    with pytest.raises(ProtocolError):
        run_protocol(one_fake, quick, "leave-one-category-out", tmp_path)


def test_embeddings(small_corpus, tiny_module, tmp_path):
    subset = small_corpus.subset(lambda r: r.source_id in sorted(small_corpus.sources())[:5])
    model = build_model(tiny_module)
    a = export_embeddings(subset, model, tiny_module, tmp_path / "a.tsv")
    b = export_embeddings(subset, model, tiny_module, tmp_path / "b.tsv")
    assert a.shape == (len(subset), 4 * tiny_module.encoder_dim)
    assert (tmp_path / "a.tsv").read_text() == (tmp_path / "b.tsv").read_text()
    lines = (tmp_path / "a.tsv").read_text().splitlines()
    assert len(lines) == len(subset) + 1 and lines[0].startswith("clip_id\tlabel\tcategory\te0")


def test_perturbation_sweep(small_corpus, tiny_module):
    subset = small_corpus.subset(lambda r: r.source_id in sorted(small_corpus.sources())[:6])
    model = build_model(tiny_module)
    res = perturbation_sweep(subset, model, tiny_module, ("gaussian_noise", "compression"), (1, 5), seed=0)
    assert [r.name for r in res] == ["clean", "gaussian_noise-1", "gaussian_noise-5", "compression-1",
                                     "compression-5"]
    assert all(len(r.rows) == len(subset) for r in res)
    assert auc_drop(res, "clean") == 0
