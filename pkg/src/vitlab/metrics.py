"""Classification metrics, run aggregation and prediction fusion."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np


@dataclass
class PredictionSet:
    probabilities: np.ndarray   # (N, K), rows sum to 1
    labels: np.ndarray          # (N,)
    source: dict = field(default_factory=dict)

    def __post_init__(self):
        self.probabilities = np.asarray(self.probabilities, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.probabilities.ndim != 2 or len(self.probabilities) != len(self.labels):
            raise ValueError(f"probabilities {self.probabilities.shape} do not match labels {self.labels.shape}")
        K = self.probabilities.shape[1]
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= K):
            raise ValueError(f"labels must lie in [0, {K})")

    @property
    def num_classes(self) -> int:
        return self.probabilities.shape[1]

    def predictions(self) -> np.ndarray:
        # argmax returns the first maximum, i.e. ties go to the lower class index
        return self.probabilities.argmax(axis=1)


@dataclass
class MetricsReport:
    acc: float
    bal_acc: float
    auc: float
    confusion: np.ndarray

    def as_dict(self) -> Dict[str, float]:
        return {"acc": self.acc, "bal_acc": self.bal_acc, "auc": self.auc}


def confusion_matrix(preds: PredictionSet) -> np.ndarray:
    """K x K counts; rows are true classes, columns argmax predictions."""
    if len(preds.labels) == 0:
        raise ValueError("confusion matrix of an empty prediction set")
    K = preds.num_classes
    cm = np.zeros((K, K), dtype=np.int64)
    np.add.at(cm, (preds.labels, preds.predictions()), 1)
    return cm


def accuracy_from_cm(cm: np.ndarray) -> float:
    return float(np.trace(cm) / cm.sum())


def balanced_accuracy(cm: np.ndarray) -> float:
    """Mean per-class recall."""
    support = cm.sum(axis=1)
    empty = np.flatnonzero(support == 0)
    if empty.size:
        raise ValueError(f"class {int(empty[0])} has no support; balanced accuracy is undefined")
    return float(np.mean(np.diag(cm) / support))


def _midranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    ranks = np.empty(len(x), dtype=np.float64)
    i = 0
    n = len(x)
    while i < n:
        j = i
        while j + 1 < n and xs[j + 1] == xs[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def binary_auc(scores: np.ndarray, positive: np.ndarray) -> float:
    """Mann-Whitney AUC: P(score_pos > score_neg) with ties counted one half."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = len(positive) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both positive and negative samples")
    ranks = _midranks(scores)
    return float((ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def auc_one_vs_rest(preds: PredictionSet, average: str = "macro") -> float:
    """Binary problems report the class-1 AUC; otherwise average one-vs-rest AUCs
    (``"macro"`` unweighted, ``"weighted"`` by class support)."""
    K = preds.num_classes
    present = np.unique(preds.labels)
    if len(present) < 2:
        raise ValueError("AUC is undefined for single-class input")
    if K == 2:
        return binary_auc(preds.probabilities[:, 1], preds.labels == 1)
    if len(present) < K:
        raise ValueError(f"one-vs-rest AUC needs every class present; missing {sorted(set(range(K)) - set(present.tolist()))}")
    aucs = np.array([binary_auc(preds.probabilities[:, c], preds.labels == c) for c in range(K)])
    if average == "macro":
        return float(aucs.mean())
    if average == "weighted":
        w = np.bincount(preds.labels, minlength=K).astype(np.float64)
        return float((aucs * w).sum() / w.sum())
    raise ValueError(f"unknown average {average!r}")


def evaluate(preds: PredictionSet, average: str = "macro") -> MetricsReport:
    cm = confusion_matrix(preds)
    return MetricsReport(accuracy_from_cm(cm), balanced_accuracy(cm), auc_one_vs_rest(preds, average), cm)


def aggregate_runs(reports: Sequence[MetricsReport]) -> Dict[str, tuple]:
    """Per-metric (mean, sample std); std is 0 for a single run."""
    if not reports:
        raise ValueError("no reports to aggregate")
    out = {}
    for key in ("acc", "bal_acc", "auc"):
        vals = np.array([getattr(r, key) for r in reports], dtype=np.float64)
        std = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
        out[key] = (float(vals.mean()), std)
    return out


def ensemble_average(members: Sequence[PredictionSet]) -> PredictionSet:
    """Elementwise mean of member probability matrices (same samples, same order)."""
    if not members:
        raise ValueError("ensemble needs at least one member")
    first = members[0]
    for m in members[1:]:
        if m.probabilities.shape != first.probabilities.shape:
            raise ValueError(f"member shape {m.probabilities.shape} != {first.probabilities.shape}")
        if not np.array_equal(m.labels, first.labels):
            raise ValueError("members disagree on sample order or labels")
    probs = np.mean([m.probabilities for m in members], axis=0)
    return PredictionSet(probs, first.labels.copy(), {"members": [m.source for m in members]})
