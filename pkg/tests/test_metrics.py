import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vitlab.metrics import (MetricsReport, PredictionSet, aggregate_runs, auc_one_vs_rest, balanced_accuracy,
                            binary_auc, confusion_matrix, ensemble_average, evaluate)


def pairs_auc(scores, positive):
    """Exhaustive pair counting with half credit for ties."""
    pos = [s for s, y in zip(scores, positive) if y]
    neg = [s for s, y in zip(scores, positive) if not y]
    total = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p, n in itertools.product(pos, neg))
    return total / (len(pos) * len(neg))


def recall_average(labels, preds, K):
    recalls = []
    for c in range(K):
        idx = [i for i, y in enumerate(labels) if y == c]
        recalls.append(sum(preds[i] == c for i in idx) / len(idx))
    return sum(recalls) / K


def _probs(pred, K=2):
    p = np.full((len(pred), K), 0.1 / (K - 1))
    p[np.arange(len(pred)), pred] = 0.9
    return p


def test_confusion_example():
    labels = [0] * 10 + [1] * 10
    pred = [0] * 8 + [1] * 2 + [1] * 7 + [0] * 3
    cm = confusion_matrix(PredictionSet(_probs(pred), labels))
    assert cm.tolist() == [[8, 2], [3, 7]]
    assert balanced_accuracy(cm) == pytest.approx(0.75, abs=1e-15)


def test_perfect_predictions():
    labels = np.array([0, 1, 2, 2, 1])
    ps = PredictionSet(_probs(labels, 3), labels)
    cm = confusion_matrix(ps)
    assert np.array_equal(cm, np.diag([1, 2, 2]))
    rep = evaluate(ps)
    assert rep.acc == rep.bal_acc == rep.auc == 1.0


def test_argmax_ties_go_to_lower_class():
    ps = PredictionSet([[0.5, 0.5], [0.2, 0.4]], [1, 1])
    assert confusion_matrix(ps).tolist() == [[0, 0], [1, 1]]


def test_balanced_accuracy_errors_and_equal_support():
    with pytest.raises(ValueError, match="class 1"):
        balanced_accuracy(np.array([[3, 1], [0, 0]]))
    cm = np.array([[4, 1], [2, 3]])
    assert balanced_accuracy(cm) == np.trace(cm) / cm.sum()


def test_auc_example_and_reversal():
    s = np.array([0.1, 0.4, 0.35, 0.8])
    y = np.array([0, 0, 1, 1])
    assert binary_auc(s, y == 1) == 0.75
    assert binary_auc(-s, y == 1) == 0.25
    ps = PredictionSet(np.stack([1 - s, s], 1), y)
    assert auc_one_vs_rest(ps) == 0.75


def test_auc_single_class_errors():
    with pytest.raises(ValueError):
        auc_one_vs_rest(PredictionSet([[0.3, 0.7], [0.6, 0.4]], [1, 1]))
    with pytest.raises(ValueError, match="missing"):
        auc_one_vs_rest(PredictionSet(np.full((3, 3), 1 / 3), [0, 1, 1]))


def test_weighted_average_option():
    rng = np.random.default_rng(0)
    labels = np.array([0] * 5 + [1] * 3 + [2] * 2)
    p = rng.dirichlet(np.ones(3), size=10)
    ps = PredictionSet(p, labels)
    per_class = [pairs_auc(p[:, c], labels == c) for c in range(3)]
    assert auc_one_vs_rest(ps, "weighted") == pytest.approx(np.dot(per_class, [5, 3, 2]) / 10, abs=1e-12)
    assert auc_one_vs_rest(ps) == pytest.approx(np.mean(per_class), abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_auc_invariant_under_monotone_transform(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 40))
    s = np.round(rng.random(n), 2)  # rounding produces ties
    y = rng.integers(0, 2, size=n)
    y[:2] = [0, 1]
    a = binary_auc(s, y == 1)
    assert binary_auc(np.exp(3 * s) - 7, y == 1) == a
    assert binary_auc(s ** 3, y == 1) == a


def test_aggregate_runs():
    reps = [MetricsReport(v, v, v, np.zeros((2, 2))) for v in (1.0, 2.0, 3.0)]
    agg = aggregate_runs(reps)
    assert agg["acc"] == (2.0, 1.0)
    assert aggregate_runs(reps[:1])["auc"] == (1.0, 0.0)
    assert aggregate_runs([reps[0]] * 3)["bal_acc"][1] == 0.0
    with pytest.raises(ValueError):
        aggregate_runs([])


def test_ensemble_examples():
    rows = [[[0.9, 0.1]], [[0.6, 0.4]], [[0.3, 0.7]]]
    out = ensemble_average([PredictionSet(r, [0]) for r in rows])
    np.testing.assert_allclose(out.probabilities, [[0.6, 0.4]], atol=1e-15)
    rng = np.random.default_rng(1)
    p = rng.dirichlet(np.ones(4), size=20)
    same = ensemble_average([PredictionSet(p, rng.integers(0, 4, 20))] * 3)
    np.testing.assert_allclose(same.probabilities, p, atol=1e-15)
    np.testing.assert_allclose(same.probabilities.sum(1), 1.0, atol=1e-12)


def test_ensemble_mismatch_errors():
    a = PredictionSet([[0.5, 0.5], [0.5, 0.5]], [0, 1])
    with pytest.raises(ValueError):
        ensemble_average([a, PredictionSet([[0.5, 0.5]], [0])])
    with pytest.raises(ValueError):
        ensemble_average([a, PredictionSet([[0.5, 0.5], [0.5, 0.5]], [1, 0])])
    with pytest.raises(ValueError):
        ensemble_average([])


def test_prediction_set_validation():
    with pytest.raises(ValueError):
        PredictionSet([[0.5, 0.5]], [2])
    with pytest.raises(ValueError):
        PredictionSet([[0.5, 0.5]], [0, 1])
