import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_auc, brute_hausdorff, brute_hd95
from spinevox.errors import EmptyMaskError, GeometryError
from spinevox.metrics import (ConfusionCounts, cls_metrics, cohen_kappa, cohen_kappa_detail,
                              cohen_kappa_table, composite_score, fleiss_counts, fleiss_kappa,
                              hausdorff, hd95, labels_from_table, overlap_metrics, pairwise_cohen,
                              read_ratings_csv, roc_auc, seg_losses)


def test_overlap_examples():
    a = np.zeros((4, 4), bool)
    a[0, :4] = True
    assert overlap_metrics(a, a) == (1.0, 1.0)
    assert overlap_metrics(a, np.roll(a, 2, axis=0)) == (0.0, 0.0)
    b = np.zeros((4, 4), bool)
    b[0, 2:] = True
    b[1, :2] = True
    iou, dice = overlap_metrics(a, b)
    assert iou == pytest.approx(1 / 3) and dice == 0.5
    empty = np.zeros((3, 3))
    assert overlap_metrics(empty, empty) == (1.0, 1.0)
    with pytest.raises(GeometryError):
        overlap_metrics(empty, np.zeros((3, 4)))


@settings(max_examples=60)
@given(st.integers(0, 2**31))
def test_dice_iou_identity(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random((6, 7)) < 0.4, rng.random((6, 7)) < 0.4
    iou, dice = overlap_metrics(a, b)
    assert dice == pytest.approx(2 * iou / (1 + iou), abs=1e-12)


def test_seg_loss_examples():
    gt = np.zeros((12, 12))
    gt[1:11, 1:11] = 1
    d, j, c = seg_losses(gt, gt)
    assert 0 <= d < 1e-5 and 0 <= j < 1e-5 and c == (d + j) / 2
    d, j, c = seg_losses(np.zeros_like(gt), gt)
    assert d == pytest.approx(1 - 1e-6 / (100 + 1e-6), abs=1e-15)
    with pytest.raises(ValueError):
        seg_losses(gt * 2, gt)


@given(st.integers(0, 2**31))
def test_combined_loss_is_mean(seed):
    rng = np.random.default_rng(seed)
    p, g = rng.random((3, 5, 5)), rng.random((3, 5, 5)) < 0.5
    d, j, c = seg_losses(p, g)
    assert c == (d + j) / 2


def test_hd95_examples():
    a = np.zeros((8, 8), bool)
    a[2:5, 2:6] = True
    assert hd95(a, a) == 0.0
    p = np.zeros((8, 8), bool)
    q = np.zeros((8, 8), bool)
    p[0, 0] = True
    q[0, 3] = True
    assert hd95(p, q) == 3.0
    assert hd95(p, q, (2.0, 0.5)) == 1.5
    with pytest.raises(EmptyMaskError):
        hd95(p, np.zeros_like(p))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 10), st.integers(1, 10), st.integers(0, 2**31))
def test_hd95_matches_brute_force(h, w, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random((h, w)) < 0.3, rng.random((h, w)) < 0.3
    if not a.any() or not b.any():
        return
    sp = tuple(rng.uniform(0.3, 2.0, 2))
    assert abs(hd95(a, b, sp) - brute_hd95(a, b, sp)) <= 1e-9
    assert hd95(a, b, sp) == hd95(b, a, sp)
    assert hd95(a, b, sp) <= hausdorff(a, b, sp) + 1e-12
    assert abs(hausdorff(a, b, sp) - brute_hausdorff(a, b, sp)) <= 1e-9


def test_hd95_3d_with_spacing():
    a = np.zeros((3, 3, 3), bool)
    b = np.zeros((3, 3, 3), bool)
    a[0, 0, 0] = True
    b[2, 1, 0] = True
    assert hd95(a, b, (2.0, 1.0, 1.0)) == pytest.approx(math.sqrt(17))


def test_composite_examples():
    assert composite_score([(0.7, 0.8, 3.0)]).tolist() == [1.0]
    two = composite_score([(0.5, 0.6, 2.0), (0.5, 0.6, 2.0)])
    assert two[0] == two[1]
    assert composite_score([(0.5, 0.6, 0.0), (0.4, 0.6, 0.0)]).tolist() == [2.0, 1.8]
    with pytest.raises(ValueError):
        composite_score([])


@given(st.lists(st.tuples(st.floats(0.01, 1), st.floats(0.01, 1), st.floats(0.01, 10)), min_size=1, max_size=8),
       st.integers(0, 2), st.floats(0.1, 100))
def test_composite_invariant_to_column_scale(entries, col, k):
    scaled = [tuple(v * k if i == col else v for i, v in enumerate(e)) for e in entries]
    np.testing.assert_allclose(composite_score(entries), composite_score(scaled), atol=1e-12)


def test_cls_examples():
    m = cls_metrics(ConfusionCounts(0, 0, 0, 10))
    assert m.accuracy == 1 and m.precision == 0 and "precision" in m.undefined
    m = cls_metrics(ConfusionCounts(8, 2, 4, 86))
    assert m.precision == pytest.approx(0.8)
    assert m.sensitivity == pytest.approx(2 / 3)
    assert m.f1 == pytest.approx(0.7273, abs=1e-4)
    m = cls_metrics(ConfusionCounts(5, 0, 0, 5))
    assert (m.accuracy, m.precision, m.sensitivity, m.specificity, m.f1) == (1, 1, 1, 1, 1)
    with pytest.raises(ValueError):
        cls_metrics(ConfusionCounts(0, 0, 0, 0))
    with pytest.raises(ValueError):
        ConfusionCounts(-1, 0, 0, 0)
    assert ConfusionCounts.from_labels([1, 0, 1, 0], [1, 1, 0, 0]) == ConfusionCounts(1, 1, 1, 1)


def test_auc_examples():
    assert roc_auc([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0]) == 1.0
    assert roc_auc([0.5] * 6, [1, 0, 1, 0, 1, 0]) == 0.5
    assert roc_auc([0.8, 0.4, 0.6, 0.2], [1, 1, 0, 0]) == 0.75
    with pytest.raises(ValueError):
        roc_auc([0.1, 0.2], [1, 1])


@settings(max_examples=60)
@given(st.lists(st.tuples(st.integers(0, 6), st.integers(0, 1)), min_size=2, max_size=30))
def test_auc_matches_pair_counting_and_monotone_transform(rows):
    scores = [r[0] / 6 for r in rows]
    labels = [r[1] for r in rows]
    if len(set(labels)) < 2:
        return
    auc = roc_auc(scores, labels)
    assert auc == pytest.approx(brute_auc(scores, labels), abs=1e-12)
    assert roc_auc([math.exp(3 * s) for s in scores], labels) == pytest.approx(auc, abs=1e-12)


def test_cohen_examples():
    assert cohen_kappa([0, 1, 1, 0], [0, 1, 1, 0]) == 1.0
    assert cohen_kappa_table([[20, 5], [10, 15]]) == pytest.approx(0.4, abs=1e-15)
    r = cohen_kappa_detail([1, 1, 1, 1], [1, 0, 1, 0])
    assert r.p_o == r.p_e and r.kappa == 0.0
    r = cohen_kappa_detail([1, 1], [1, 1])
    assert r.degenerate and r.kappa == 1.0
    r = cohen_kappa_detail(["a", "a"], ["b", "b"])
    assert r.kappa == 0.0 and not r.degenerate
    with pytest.raises(ValueError):
        cohen_kappa([1], [1, 0])


@settings(max_examples=60)
@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1)), min_size=1, max_size=30))
def test_cohen_symmetric_and_bounded(pairs):
    a = [p[0] for p in pairs]
    b = [p[1] for p in pairs]
    k = cohen_kappa(a, b)
    assert k == pytest.approx(cohen_kappa(b, a), abs=1e-12)
    assert -1 - 1e-12 <= k <= 1 + 1e-12


def test_fleiss_examples():
    assert fleiss_kappa([[3, 0], [0, 3], [3, 0]]) == 1.0
    with pytest.raises(ValueError):
        fleiss_kappa([[3, 0], [2, 0]])
    # textbook check: two categories, perfectly split raters
    assert fleiss_kappa([[1, 1], [1, 1]]) == pytest.approx(-1.0)


def test_labels_from_table():
    a, b = labels_from_table([[1, 2], [0, 1]])
    assert a == [0, 0, 0, 1] and b == [0, 1, 1, 1]


def test_ratings_csv(tmp_path):
    p = tmp_path / "r.csv"
    p.write_text("subject_id,rater_id,label\ns1,r1,1\ns1,r2,1\ns2,r1,0\ns2,r2,1\n")
    ratings = read_ratings_csv(p)
    counts, subjects, cats = fleiss_counts(ratings)
    assert subjects == ["s1", "s2"] and cats == ["0", "1"]
    assert counts.tolist() == [[0, 2], [1, 1]]
    assert list(pairwise_cohen(ratings)) == [("r1", "r2")]
    p.write_text("subject_id,rater_id,label\ns1,r1,1\ns1,r1,0\n")
    with pytest.raises(ValueError):
        read_ratings_csv(p)
