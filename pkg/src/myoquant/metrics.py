"""Segmentation and clustering scores."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment


def dice(a, b) -> float:
    """2|a & b| / (|a| + |b|); two empty masks score 1."""
    a = np.asarray(a, bool)
    b = np.asarray(b, bool)
    if a.shape != b.shape:
        raise ValueError(f"dice: mask shapes {a.shape} and {b.shape} differ")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / total


@dataclass
class ConfusionTable:
    """Counts of (true class, predicted cluster) pairs."""

    counts: np.ndarray
    classes: np.ndarray
    clusters: np.ndarray

    @classmethod
    def from_labels(cls, truth, pred) -> "ConfusionTable":
        t = np.asarray(truth).reshape(-1)
        p = np.asarray(pred).reshape(-1)
        if t.shape != p.shape:
            raise ValueError(f"label arrays differ in size: {t.size} vs {p.size}")
        classes, ti = np.unique(t, return_inverse=True)
        clusters, pi = np.unique(p, return_inverse=True)
        counts = np.zeros((len(classes), len(clusters)), dtype=np.int64)
        np.add.at(counts, (ti, pi), 1)
        return cls(counts, classes, clusters)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def row_sums(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    @property
    def col_sums(self) -> np.ndarray:
        return self.counts.sum(axis=0)


def clustering_accuracy(truth, pred) -> float:
    """Agreement under the best one-to-one matching of clusters to classes."""
    table = ConfusionTable.from_labels(truth, pred)
    if table.total == 0:
        raise ValueError("clustering_accuracy: no points")
    rows, cols = linear_sum_assignment(-table.counts)
    return float(table.counts[rows, cols].sum() / table.total)


def _entropy(counts: np.ndarray, n: int) -> float:
    p = counts[counts > 0] / n
    return float(-(p * np.log(p)).sum())


def nmi(truth, pred) -> float:
    """I(T; P) / sqrt(H(T) H(P)); 0 when either labeling has a single group."""
    table = ConfusionTable.from_labels(truth, pred)
    n = table.total
    ht, hp = _entropy(table.row_sums, n), _entropy(table.col_sums, n)
    if ht == 0 or hp == 0:
        return 0.0
    c = table.counts.astype(np.float64)
    nz = c > 0
    outer = np.outer(table.row_sums, table.col_sums).astype(np.float64)
    mi = float((c[nz] / n * np.log(c[nz] * n / outer[nz])).sum())
    return float(max(mi, 0.0) / np.sqrt(ht * hp))


def _comb2(x):
    x = np.asarray(x, dtype=np.float64)
    return x * (x - 1) / 2


def ari(truth, pred) -> float:
    """Adjusted Rand index from the contingency table."""
    table = ConfusionTable.from_labels(truth, pred)
    n = table.total
    sum_ij = _comb2(table.counts).sum()
    sum_a = _comb2(table.row_sums).sum()
    sum_b = _comb2(table.col_sums).sum()
    total = _comb2(n)
    if total == 0:
        return 1.0
    expected = sum_a * sum_b / total
    max_index = 0.5 * (sum_a + sum_b)
    if max_index == expected:
        # both partitions trivial (all singletons or one group)
        return 1.0
    return float((sum_ij - expected) / (max_index - expected))


def fat_fraction_index(labels, region) -> float:
    """Fraction of region pixels labelled IMAT (label 1)."""
    region = np.asarray(region, bool)
    if not region.any():
        raise ValueError("fat_fraction_index: empty region")
    return float((np.asarray(labels)[region] == 1).mean())


def tissue_scores(truth_labels, pred_labels, region) -> dict[str, float]:
    """Per-tissue Dice plus ACC/NMI/ARI restricted to the region.

    Labels are 0 = healthy muscle, 1 = IMAT.
    """
    region = np.asarray(region, bool)
    t = np.asarray(truth_labels)[region]
    p = np.asarray(pred_labels)[region]
    return {
        "dice_muscle": dice(t == 0, p == 0),
        "dice_imat": dice(t == 1, p == 1),
        "acc": clustering_accuracy(t, p),
        "nmi": nmi(t, p),
        "ari": ari(t, p),
        "fat_fraction_pred": float((p == 1).mean()),
        "fat_fraction_truth": float((t == 1).mean()),
    }
