import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import brute_lcs, brute_tdr, random_pairs

from kvguard.faultlab import (
    Category,
    classify_trial,
    corruption_indicator,
    cumulative,
    lcs_length,
    ocr,
    rouge_l_f1,
    tcr,
    tdr,
)


def test_tcr_examples():
    base = [[1], [2], [3], [4]]
    assert tcr(base, [[1], [9], [3], [9]]) == 0.5
    assert tcr(base, base) == 0.0
    assert tcr(base, [[0], [0], [0], [0]]) == 1.0


def test_tcr_errors():
    with pytest.raises(ValueError):
        tcr([[1]], [[1], [2]])


@pytest.mark.parametrize("seed", range(20))
def test_tcr_brute_force(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 33))
    ys = [rng.integers(0, 3, 4).tolist() for _ in range(n)]
    ys_hat = [y if rng.random() < 0.5 else rng.integers(0, 3, 4).tolist() for y in ys]
    changed = 0
    for y, y_hat in zip(ys, ys_hat):
        changed += any(p != q for p, q in zip(y, y_hat))
    assert abs(tcr(ys, ys_hat) - changed / n) < 1e-9


def test_tdr_examples():
    assert tdr([1, 2, 3, 4, 5], [1, 9, 3, 4, 5]) == pytest.approx(0.2, abs=1e-12)
    assert tdr([1, 2, 3], [1, 2, 3, 4, 5]) == pytest.approx(0.4, abs=1e-12)
    assert tdr([1, 2, 3], [1, 2, 3]) == 0.0
    assert tdr([], []) == 0.0


@pytest.mark.parametrize("seed", range(20))
def test_tdr_brute_force(seed):
    for a, b in random_pairs(seed):
        assert abs(tdr(a, b) - brute_tdr(a, b)) < 1e-9


def test_ocr_examples():
    assert ocr([0, 0.5, 1.0]) == pytest.approx(2 / 3)
    assert ocr([0, 0, 0]) == 0
    assert ocr([0.1, 1.0]) == 1
    with pytest.raises(ValueError):
        ocr([])


@pytest.mark.parametrize("seed", range(20))
def test_ocr_brute_force(seed):
    rng = np.random.default_rng(seed)
    t = rng.choice([0.0, 0.25, 0.5, 1.0], int(rng.integers(1, 50))).tolist()
    assert abs(ocr(t) - len([x for x in t if x != 0]) / len(t)) < 1e-9


def test_rouge_examples():
    assert rouge_l_f1([1, 2, 3], [1, 2, 3]) == 1.0
    assert rouge_l_f1([1, 2, 3], [1, 3]) == pytest.approx(0.8, abs=1e-12)
    assert rouge_l_f1([1, 2, 3], [4, 5]) == 0.0
    assert rouge_l_f1([], [1]) == 0.0


@pytest.mark.parametrize("seed", range(20))
def test_rouge_brute_force(seed):
    for a, b in random_pairs(seed + 1000):
        lcs = brute_lcs(a, b)
        assert lcs_length(a, b) == lcs
        expected = 0.0 if lcs == 0 else 2 * lcs / (len(a) + len(b))
        assert abs(rouge_l_f1(a, b) - expected) < 1e-9


@given(st.lists(st.integers(0, 3), max_size=12), st.lists(st.integers(0, 3), max_size=12))
def test_metric_bounds_and_symmetry(a, b):
    for value in (tdr(a, b), rouge_l_f1(a, b)):
        assert 0.0 <= value <= 1.0
    assert rouge_l_f1(a, b) == pytest.approx(rouge_l_f1(b, a))
    if a and len(a) == len(b):
        assert (tdr(a, b) == 0) == (rouge_l_f1(a, b) == 1.0) == (a == b)


@pytest.mark.parametrize("t, r, cat", [
    (1.0, 0.000, Category.COLLAPSE),
    (1.0, 0.951, Category.COMPLETE),
    (0.0, 1.0, Category.NO_EFFECT),
    (0.5, 0.0, Category.PARTIAL),
    (1.0, 0.1, Category.COMPLETE),
])
def test_classification(t, r, cat):
    assert classify_trial(t, r) is cat


def test_classification_rejects_out_of_range():
    with pytest.raises(ValueError):
        classify_trial(1.5, 0.5)


def test_cumulative_examples():
    assert cumulative([True] * 100)[-1] == 100
    for n in range(1, 12):
        assert cumulative([i % 2 == 0 for i in range(n)])[-1] == math.ceil(n / 2)
    assert cumulative([False] * 7)[-1] == 0


@given(st.lists(st.tuples(st.lists(st.integers(0, 2), max_size=3), st.lists(st.integers(0, 2), max_size=3))))
def test_cumulative_matches_recount(pairs):
    indicators = [corruption_indicator(y, y_hat) for y, y_hat in pairs]
    c = cumulative(indicators)
    for i in range(len(pairs)):
        assert c[i] == sum(1 for y, y_hat in pairs[:i + 1] if y != y_hat)
