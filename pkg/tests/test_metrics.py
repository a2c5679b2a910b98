import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from avff.metrics import UndefinedMetricError, acc, ap, auc


def pairwise_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def brute_ap(scores, labels):
    """Precision at each distinct threshold, weighted by the recall it adds."""
    total_pos = sum(labels)
    out, prev_recall = 0.0, 0.0
    for t in sorted(set(scores), reverse=True):
        chosen = [y for s, y in zip(scores, labels) if s >= t]
        recall = sum(chosen) / total_pos
        out += (recall - prev_recall) * sum(chosen) / len(chosen)
        prev_recall = recall
    return out


def _instance(rng):
    n = int(rng.integers(2, 60))
    labels = rng.integers(0, 2, n)
    labels[:2] = (0, 1)
    scores = rng.integers(0, 8, n) / 8 if rng.random() < 0.5 else rng.random(n)   # with and without ties
    return scores, labels


def test_auc_matches_pairwise_oracle():
    rng = np.random.default_rng(0)
    for _ in range(50):
        scores, labels = _instance(rng)
        assert auc(scores, labels) == pairwise_auc(scores, labels)


def test_ap_matches_brute_force():
    rng = np.random.default_rng(1)
    for _ in range(50):
        scores, labels = _instance(rng)
        assert ap(scores, labels) == pytest.approx(brute_ap(list(scores), list(labels)), rel=1e-12)


def test_random_scores():
    rng = np.random.default_rng(2)
    assert abs(auc(rng.random(10_000), rng.integers(0, 2, 10_000)) - 0.5) <= 0.02


def test_reference_cases():
    assert auc([0.9, 0.1], [1, 0]) == 1.0
    assert auc([0.1, 0.9], [1, 0]) == 0.0
    assert auc([0.5, 0.5], [1, 0]) == 0.5
    assert ap([0.9, 0.8, 0.1], [1, 0, 1]) == pytest.approx((1 + 2 / 3) / 2)
    assert acc([1, 0, 1, 1], [1, 0, 0, 1]) == 0.75


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_monotone_invariance(seed):
    rng = np.random.default_rng(seed)
    scores, labels = _instance(rng)
    for g in (lambda s: 3 * s + 1, np.exp, lambda s: s ** 3):
        assert auc(g(scores), labels) == pytest.approx(auc(scores, labels), abs=1e-12)
        assert ap(g(scores), labels) == pytest.approx(ap(scores, labels), abs=1e-12)


def test_errors():
    with pytest.raises(UndefinedMetricError):
        auc([0.1, 0.2], [1, 1])
    with pytest.raises(UndefinedMetricError):
        ap([0.1, 0.2], [0, 0])
    with pytest.raises(ValueError):
        auc([0.1, 0.2, 0.3], [0, 1])
    with pytest.raises(ValueError):
        acc([], [])
