import numpy as np
import pytest

from wsloc.metrics import MetricsError, confusion_matrix, predictions, topk_accuracy


def test_perfect_predictor_top1():
    labels = np.array([0, 1, 2, 3])
    logits = np.eye(4) * 5.0
    assert topk_accuracy(logits, labels, 1) == 1.0


def test_uniform_logits_tie_break_to_class_zero():
    labels = np.array([0, 1, 0, 2, 0, 3])
    logits = np.zeros((6, 4))
    acc = topk_accuracy(logits, labels, 1)
    assert acc == np.mean(labels == 0)


def test_topk_matches_sort_oracle():
    rng = np.random.default_rng(0)
    logits = rng.standard_normal((50, 7))
    labels = rng.integers(0, 7, 50)
    got = topk_accuracy(logits, labels, 3)
    hits = 0
    for row, label in zip(logits, labels):
        ranked = sorted(range(7), key=lambda k: (-row[k], k))[:3]
        hits += label in ranked
    assert got == hits / 50


def test_topk_monotone_in_k():
    rng = np.random.default_rng(1)
    logits = rng.standard_normal((40, 6))
    labels = rng.integers(0, 6, 40)
    accs = [topk_accuracy(logits, labels, k) for k in range(1, 7)]
    assert all(b >= a for a, b in zip(accs, accs[1:]))
    assert accs[-1] == 1.0


def test_topk_argument_validation():
    logits = np.zeros((3, 4))
    labels = np.zeros(3, dtype=int)
    with pytest.raises(MetricsError):
        topk_accuracy(logits, labels, 5)
    with pytest.raises(MetricsError):
        topk_accuracy(logits, labels, 0)
    with pytest.raises(MetricsError):
        topk_accuracy(np.zeros((0, 4)), np.zeros(0, dtype=int), 1)


def test_confusion_perfect_is_diagonal():
    labels = np.array([0, 1, 2, 2, 1])
    counts = confusion_matrix(labels, labels, 3)
    assert np.array_equal(counts, np.diag([1, 2, 2]))


def test_confusion_single_column():
    labels = np.array([0, 1, 2, 1])
    preds = np.zeros(4, dtype=int)
    counts = confusion_matrix(preds, labels, 3)
    assert counts[:, 0].sum() == 4 and counts[:, 1:].sum() == 0


def test_confusion_matches_loop_oracle():
    rng = np.random.default_rng(2)
    preds = rng.integers(0, 5, 200)
    labels = rng.integers(0, 5, 200)
    counts = confusion_matrix(preds, labels, 5)
    expected = np.zeros((5, 5), dtype=int)
    for p, t in zip(preds, labels):
        expected[t, p] += 1
    assert np.array_equal(counts, expected)


def test_confusion_row_sums_are_support():
    rng = np.random.default_rng(3)
    preds = rng.integers(0, 4, 100)
    labels = rng.integers(0, 4, 100)
    counts = confusion_matrix(preds, labels, 4)
    assert np.array_equal(counts.sum(axis=1), np.bincount(labels, minlength=4))


def test_trace_over_total_equals_top1():
    rng = np.random.default_rng(4)
    logits = rng.standard_normal((80, 5))
    labels = rng.integers(0, 5, 80)
    preds = predictions(logits)
    counts = confusion_matrix(preds, labels, 5)
    assert counts.sum() == 80
    assert np.trace(counts) / counts.sum() == topk_accuracy(logits, labels, 1)


def test_confusion_out_of_range():
    with pytest.raises(MetricsError):
        confusion_matrix(np.array([0, 5]), np.array([0, 1]), 3)
