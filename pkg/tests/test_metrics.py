import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedexdnn import metrics as mt
from fedexdnn.metrics import ScoredSet


def pairwise_auc(s, y):
    pos, neg = s[y == 1], s[y == 0]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def brute_best_f1(s, y):
    best = (-1.0, None)
    for thr in sorted(set(s.tolist()), reverse=True):
        pred = s >= thr
        tp = int((pred & (y == 1)).sum())
        fp = int((pred & (y == 0)).sum())
        fn = int((~pred & (y == 1)).sum())
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        f = 2 * p * r / (p + r) if p + r else 0.0
        if f > best[0]:
            best = (f, thr)
    return best


def random_set(rng, n, ties=False):
    s = rng.integers(0, 20, n).astype(float) if ties else rng.standard_normal(n)
    y = rng.integers(0, 2, n)
    y[0], y[1] = 0, 1
    return s, y


def test_auc_cases():
    assert mt.auc(ScoredSet([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1])) == 1.0
    assert mt.auc(ScoredSet(np.zeros(6), [0, 1, 0, 1, 1, 0])) == 0.5


@pytest.mark.parametrize("ties", [False, True])
def test_auc_pairwise_oracle(rng, ties):
    s, y = random_set(rng, 200, ties)
    assert mt.auc(ScoredSet(s, y)) == pytest.approx(pairwise_auc(s, y), abs=1e-12)


def test_auc_single_class_rejected():
    with pytest.raises(mt.MetricError):
        mt.auc(ScoredSet([0.1, 0.2], [0, 0]))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31))
def test_auc_monotone_invariance_and_flip(seed):
    s, y = random_set(np.random.default_rng(seed), 50, ties=True)
    a = mt.auc(ScoredSet(s, y))
    assert mt.auc(ScoredSet(np.exp(s / 5) * 3 + 1, y)) == pytest.approx(a, abs=1e-12)
    assert 1 - a == pytest.approx(mt.auc(ScoredSet(s, 1 - y)), abs=1e-12)


def test_best_f1_separated():
    d = mt.best_f1(ScoredSet([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]))
    assert d.f1 == 1.0 and d.threshold == 0.8


def test_all_flagged_boundary():
    s = np.array([0.3, 0.1, 0.5, 0.2, 0.9])
    y = np.array([0, 0, 1, 0, 1])
    f1, p, r = mt.prf_at(ScoredSet(s, y), s.min())
    assert p == pytest.approx(y.mean()) and r == 1.0


@pytest.mark.parametrize("ties", [False, True])
def test_best_f1_brute_force(rng, ties):
    s, y = random_set(rng, 100, ties)
    d = mt.best_f1(ScoredSet(s, y))
    f, thr = brute_best_f1(s, y)
    assert d.f1 == f and d.threshold == thr


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.floats(-3, 3))
def test_best_f1_dominates_fixed_threshold(seed, thr):
    s, y = random_set(np.random.default_rng(seed), 40)
    sc = ScoredSet(s, y)
    assert mt.best_f1(sc).f1 >= mt.prf_at(sc, thr)[0]


def test_select_then_apply_same_set(rng):
    s, y = random_set(rng, 60)
    sc = ScoredSet(s, y)
    d, b = mt.select_then_apply(sc, sc), mt.best_f1(sc)
    assert (d.f1, d.threshold) == (b.f1, b.threshold)


def test_select_then_apply_low_threshold_full_recall():
    val = ScoredSet([-10.0, -9.0, -8.0], [1, 1, 0])  # best threshold -10 flags everything
    test = ScoredSet([0.1, 0.5, 0.9, 0.2], [0, 1, 1, 0])
    d = mt.select_then_apply(val, test)
    assert d.threshold == -10.0 and d.recall == 1.0


def test_applied_never_beats_test_oracle(rng):
    for _ in range(20):
        s_val, y_val = random_set(rng, 80)
        s_test, y_test = random_set(rng, 80)
        s_test = s_test + rng.normal(0.5, 0.2)  # drift
        applied = mt.select_then_apply(ScoredSet(s_val, y_val), ScoredSet(s_test, y_test))
        assert applied.f1 <= mt.best_f1(ScoredSet(s_test, y_test)).f1 + 1e-15
