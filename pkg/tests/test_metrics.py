import numpy as np
import pytest

from myoquant.metrics import (
    ConfusionTable,
    ari,
    clustering_accuracy,
    dice,
    fat_fraction_index,
    nmi,
    tissue_scores,
)
from oracles import brute_acc, brute_ari, brute_nmi


def test_dice_examples():
    a = np.zeros(400, bool)
    a[:100] = True
    assert dice(a, a) == 1.0
    assert dice(a, np.roll(a, 200)) == 0.0
    assert dice(a, np.roll(a, 50)) == 0.5
    z = np.zeros(10, bool)
    assert dice(z, z) == 1.0
    assert dice(z, a[:10]) == 0.0
    with pytest.raises(ValueError, match="shapes"):
        dice(a, a[:10])


def test_dice_monotone_in_overlap():
    a = np.zeros(200, bool)
    a[:50] = True
    vals = [dice(a, np.roll(a, s)) for s in range(0, 51)]
    assert all(x > y for x, y in zip(vals, vals[1:]))


def test_acc_examples():
    t = np.array([0, 0, 1, 1, 1, 0, 1, 0, 0, 1])
    assert clustering_accuracy(t, t) == 1.0
    assert clustering_accuracy(t, 1 - t) == 1.0
    p = np.array([0, 1, 1, 1, 0, 0, 1, 1, 0, 1])
    both = max(np.mean(t == p), np.mean(t == 1 - p))
    assert clustering_accuracy(t, p) == pytest.approx(both)


def test_nmi_examples():
    t = np.array([0, 1] * 8)
    assert nmi(t, t) == pytest.approx(1.0)
    # product distribution: every (class, cluster) cell equal
    truth = np.repeat([0, 1], 6)
    pred = np.tile([0, 1, 2], 4)
    assert abs(nmi(truth, pred)) < 1e-12
    assert nmi(t, np.zeros_like(t)) == 0.0


def test_ari_examples():
    t = [0, 0, 0, 1, 1, 1]
    p = [0, 0, 1, 1, 1, 0]
    assert ari(t, t) == pytest.approx(1.0)
    assert ari(t, p) == pytest.approx(brute_ari(t, p), abs=1e-12)
    assert ari([0, 0, 1, 1], [0, 0, 0, 0]) == pytest.approx(0.0)


def test_random_partitions_match_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n = int(rng.integers(2, 13))
        t = rng.integers(0, 3, n).tolist()
        p = rng.integers(0, 3, n).tolist()
        assert ari(t, p) == pytest.approx(brute_ari(t, p), abs=1e-12)
        assert nmi(t, p) == pytest.approx(brute_nmi(t, p), abs=1e-12)
        assert clustering_accuracy(t, p) == pytest.approx(brute_acc(t, p))


def test_relabel_invariance_and_k2_floor():
    rng = np.random.default_rng(1)
    for _ in range(50):
        t = rng.integers(0, 2, 30)
        p = rng.integers(0, 2, 30)
        q = np.where(p == 0, 7, 3)
        assert ari(t, p) == pytest.approx(ari(t, q))
        assert nmi(t, p) == pytest.approx(nmi(t, q))
        assert clustering_accuracy(t, p) == pytest.approx(clustering_accuracy(t, q))
        assert ari(t, p) == pytest.approx(ari(p, t))
        assert clustering_accuracy(t, p) >= 0.5


def test_confusion_table_marginals():
    tab = ConfusionTable.from_labels([0, 1, 1, 2], [1, 1, 0, 0])
    assert tab.counts.min() >= 0
    assert tab.row_sums.sum() == tab.col_sums.sum() == tab.total == 4


def test_fat_fraction_index():
    region = np.ones((4, 4), bool)
    assert fat_fraction_index(np.zeros((4, 4)), region) == 0.0
    assert fat_fraction_index(np.ones((4, 4)), region) == 1.0
    labels = np.zeros((4, 4))
    labels[0] = 1
    assert fat_fraction_index(labels, region) == 0.25
    with pytest.raises(ValueError):
        fat_fraction_index(labels, ~region)


def test_tissue_scores_keys():
    region = np.ones((3, 3), bool)
    lab = np.eye(3)
    s = tissue_scores(lab, lab, region)
    assert list(s) == ["dice_muscle", "dice_imat", "acc", "nmi", "ari",
                       "fat_fraction_pred", "fat_fraction_truth"]
    assert s["acc"] == 1.0 and s["dice_imat"] == 1.0
