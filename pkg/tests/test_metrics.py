import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shield.errors import DomainError, ShapeError, UndefinedMetricError
from shield.metrics import ClassScores, Metrics, accuracy, auc, compute_metrics, macro_f1


def auc_oracle(labels, scores):
    """Brute force over all (positive, negative) pairs; ties score 0.5."""
    pos = [s for y, s in zip(labels, scores) if y == 1]
    neg = [s for y, s in zip(labels, scores) if y == 0]
    total = 0.0
    for p in pos:
        for q in neg:
            if p > q:
                total += 1.0
            elif p == q:
                total += 0.5
    return total / (len(pos) * len(neg))


def f1_oracle(labels, preds):
    """Confusion-matrix walk, one class at a time."""
    scores = {}
    for cls in (0, 1):
        tp = fp = fn = 0
        for y, p in zip(labels, preds):
            if p == cls and y == cls:
                tp += 1
            elif p == cls and y != cls:
                fp += 1
            elif p != cls and y == cls:
                fn += 1
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        scores[cls] = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
    return (scores[0] + scores[1]) / 2


def test_auc_hand_case():
    assert auc([1, 0, 1, 0], [0.9, 0.8, 0.1, 0.2]) == 0.5


def test_auc_perfect_and_inverted():
    assert auc([0, 0, 1, 1], [0.1, 0.2, 0.8, 0.9]) == 1.0
    assert auc([0, 0, 1, 1], [0.9, 0.8, 0.2, 0.1]) == 0.0


def test_auc_all_ties_is_half():
    assert auc([0, 1, 0, 1, 1], [0.3] * 5) == 0.5


def test_auc_single_class_undefined():
    with pytest.raises(UndefinedMetricError):
        auc([1, 1, 1], [0.1, 0.2, 0.3])
    with pytest.raises(UndefinedMetricError):
        auc([0, 0], [0.1, 0.2])


def test_auc_label_domain():
    with pytest.raises(DomainError):
        auc([0, 2], [0.1, 0.2])
    with pytest.raises(ShapeError):
        auc([], [])


def test_auc_matches_oracle_on_random_sets():
    rng = np.random.default_rng(0)
    for _ in range(300):
        n = int(rng.integers(2, 40))
        labels = rng.integers(0, 2, n)
        if labels.min() == labels.max():
            labels[0] = 1 - labels[0]
        # coarse grid of scores forces plenty of ties
        scores = rng.integers(0, 5, n) / 4.0
        assert auc(labels, scores) == auc_oracle(labels.tolist(), scores.tolist())


def test_auc_invariant_under_monotone_transform():
    rng = np.random.default_rng(1)
    labels = rng.integers(0, 2, 50)
    labels[0], labels[1] = 0, 1
    scores = rng.standard_normal(50)
    base = auc(labels, scores)
    assert auc(labels, 3.0 * scores + 7.0) == base
    assert abs(auc(labels, np.tanh(scores)) - base) < 1e-12


def test_macro_f1_hand_case():
    # class 1: P=1, R=1/2, F1=2/3; class 0: P=2/3, R=1, F1=4/5
    macro, per_class = macro_f1([1, 1, 0, 0], [1, 0, 0, 0])
    assert abs(macro - (2 / 3 + 4 / 5) / 2) < 1e-15
    assert per_class[1].precision == 1.0 and per_class[1].recall == 0.5
    assert abs(per_class[0].f1 - 0.8) < 1e-15


def test_macro_f1_all_one_predictions():
    macro, per_class = macro_f1([1, 0, 1, 0], [1, 1, 1, 1])
    assert per_class[0].f1 == 0.0
    assert abs(per_class[1].f1 - 2 / 3) < 1e-15
    assert abs(macro - 1 / 3) < 1e-15


def test_macro_f1_matches_oracle_on_random_sets():
    rng = np.random.default_rng(2)
    for _ in range(300):
        n = int(rng.integers(1, 40))
        labels = rng.integers(0, 2, n)
        preds = rng.integers(0, 2, n)
        macro, _ = macro_f1(labels, preds)
        assert macro == f1_oracle(labels.tolist(), preds.tolist())


def test_accuracy():
    assert accuracy([1, 0, 1, 0], [1, 0, 0, 0]) == 0.75
    assert accuracy([1, 0], [0, 1]) == 0.0


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 6), st.integers(0, 1)),
                min_size=2, max_size=25))
def test_metrics_match_oracles_property(rows):
    labels = [y for y, _, _ in rows]
    if len(set(labels)) < 2:
        labels[0] = 1 - labels[0]
    scores = [s / 6.0 for _, s, _ in rows]
    preds = [p for _, _, p in rows]
    assert auc(labels, scores) == auc_oracle(labels, scores)
    macro, _ = macro_f1(labels, preds)
    assert macro == f1_oracle(labels, preds)


def test_compute_metrics_shape_and_json():
    m = compute_metrics([1, 0, 1, 0], [0.9, 0.2, 0.6, 0.4], [1, 0, 1, 0])
    assert isinstance(m, Metrics)
    d = m.to_dict()
    json.dumps(d)
    assert set(d) == {"auc", "accuracy", "macro_f1", "per_class", "n"}
    assert set(d["per_class"]) == {"0", "1"}
    assert set(d["per_class"]["1"]) == {"precision", "recall", "f1"}
    assert d["n"] == 4
    assert d["auc"] == 1.0 and d["accuracy"] == 1.0 and d["macro_f1"] == 1.0


def test_per_class_scores_type():
    _, per_class = macro_f1([0, 1], [0, 1])
    assert isinstance(per_class[0], ClassScores)
    assert per_class[0].f1 == per_class[1].f1 == 1.0
