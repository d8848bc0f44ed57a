"""
Evaluation maths: mask overlap, soft segmentation losses, HD95, the
normalised composite ranking score, classification metrics, ROC-AUC and
inter-rater agreement.
"""

from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import dataclass
from typing import Dict, Sequence, Tuple

import numpy as np
from scipy import ndimage, stats

from .errors import EmptyMaskError, GeometryError


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    @classmethod
    def from_labels(cls, y_true, y_pred) -> "ConfusionCounts":
        t = np.asarray(y_true).astype(bool)
        p = np.asarray(y_pred).astype(bool)
        if t.shape != p.shape:
            raise ValueError("label arrays differ in shape")
        return cls(int((t & p).sum()), int((~t & p).sum()), int((t & ~p).sum()), int((~t & ~p).sum()))


@dataclass(frozen=True)
class ClsMetrics:
    accuracy: float
    precision: float
    sensitivity: float
    specificity: float
    f1: float
    undefined: Tuple[str, ...] = ()


def _same_shape(a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise GeometryError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return a, b


def overlap_metrics(pred, gt) -> Tuple[float, float]:
    """(IoU, Dice) of two binary masks. Two empty masks score (1, 1)."""
    p, g = _same_shape(pred, gt)
    p, g = p.astype(bool), g.astype(bool)
    tp = int((p & g).sum())
    fp = int((p & ~g).sum())
    fn = int((~p & g).sum())
    if tp + fp + fn == 0:
        return 1.0, 1.0
    return tp / (tp + fp + fn), 2 * tp / (2 * tp + fp + fn)


def seg_losses(pred, gt, eps: float = 1e-6) -> Tuple[float, float, float]:
    """Soft Dice, soft Jaccard and their mean, summed over every pixel and channel."""
    p, y = _same_shape(pred, gt)
    p = p.astype(np.float64)
    y = y.astype(np.float64)
    if ((p < 0) | (p > 1)).any():
        raise ValueError("predicted probabilities must lie in [0, 1]")
    inter = float((y * p).sum())
    total = float((y + p).sum())
    dice = 1.0 - (2.0 * inter + eps) / (total + eps)
    jacc = 1.0 - (inter + eps) / (total - inter + eps)
    return dice, jacc, (dice + jacc) / 2.0


def _directed_distances(a, b, spacing):
    # distance from every foreground voxel of a to the nearest foreground voxel of b
    dist = ndimage.distance_transform_edt(~b, sampling=spacing)
    return dist[a]


def surface_distances(a, b, spacing=None):
    a, b = _same_shape(a, b)
    a, b = a.astype(bool), b.astype(bool)
    if not a.any() or not b.any():
        raise EmptyMaskError("distances are undefined for an empty mask")
    spacing = tuple(float(s) for s in (spacing or (1.0,) * a.ndim))
    if len(spacing) != a.ndim:
        raise ValueError(f"spacing {spacing} does not match mask rank {a.ndim}")
    return _directed_distances(a, b, spacing), _directed_distances(b, a, spacing)


def hd95(a, b, spacing=None) -> float:
    """Symmetric 95th-percentile distance over all foreground voxels (mm).

    Percentiles use linear interpolation.
    """
    dab, dba = surface_distances(a, b, spacing)
    return float(max(np.percentile(dab, 95), np.percentile(dba, 95)))


def hausdorff(a, b, spacing=None) -> float:
    dab, dba = surface_distances(a, b, spacing)
    return float(max(dab.max(), dba.max()))


def composite_score(entries: Sequence[Tuple[float, float, float]]) -> np.ndarray:
    """IoU/max(IoU) + DSC/max(DSC) - HD95/max(HD95) for each entry.

    A column whose maximum is 0 contributes 0 to every entry.
    """
    arr = np.asarray(entries, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("composite score of an empty set")
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError("entries must be (IoU, DSC, HD95) triples")
    if (arr < 0).any():
        raise ValueError("metrics must be non-negative")
    col_max = arr.max(axis=0)
    safe = np.where(col_max > 0, col_max, 1.0)
    norm = np.where(col_max > 0, arr / safe, 0.0)
    return norm[:, 0] + norm[:, 1] - norm[:, 2]


def _ratio(num, den, name, undefined):
    if den == 0:
        undefined.append(name)
        return 0.0
    return num / den


def cls_metrics(counts: ConfusionCounts) -> ClsMetrics:
    """Accuracy, precision, sensitivity, specificity and F1; 0/0 becomes 0 and is listed in ``undefined``."""
    if counts.total == 0:
        raise ValueError("all confusion counts are zero")
    tp, fp, fn, tn = counts.tp, counts.fp, counts.fn, counts.tn
    undefined = []
    acc = (tp + tn) / counts.total
    prec = _ratio(tp, tp + fp, "precision", undefined)
    sens = _ratio(tp, tp + fn, "sensitivity", undefined)
    spec = _ratio(tn, tn + fp, "specificity", undefined)
    f1 = _ratio(2 * tp, 2 * tp + fp + fn, "f1", undefined)
    return ClsMetrics(acc, prec, sens, spec, f1, tuple(undefined))


def roc_auc(scores, labels) -> float:
    """Mann-Whitney AUC with midranks for tied scores."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError("scores and labels must be 1D and equally long")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = int(y.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC-AUC needs at least one positive and one negative")
    ranks = stats.rankdata(s, method="average")
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


# ---------------------------------------------------------------- agreement

@dataclass(frozen=True)
class KappaResult:
    kappa: float
    p_o: float
    p_e: float
    degenerate: bool = False


def cohen_kappa_detail(labels_a, labels_b) -> KappaResult:
    a = list(labels_a)
    b = list(labels_b)
    if len(a) != len(b):
        raise ValueError(f"rating sequences differ in length: {len(a)} vs {len(b)}")
    if not a:
        raise ValueError("cohen_kappa needs at least one subject")
    n = len(a)
    cats = sorted(set(a) | set(b), key=str)
    # integer counts keep the final division as the only rounding step
    agree = sum(1 for x, y in zip(a, b) if x == y)
    chance = sum(a.count(c) * b.count(c) for c in cats)
    p_o, p_e = agree / n, chance / (n * n)
    if chance == n * n:
        return KappaResult(1.0 if agree == n else 0.0, p_o, p_e, True)
    return KappaResult((n * agree - chance) / (n * n - chance), p_o, p_e)


def cohen_kappa(labels_a, labels_b) -> float:
    return cohen_kappa_detail(labels_a, labels_b).kappa


def labels_from_table(table) -> Tuple[list, list]:
    """Expand a square contingency table (rows: rater A, cols: rater B) to label sequences."""
    t = np.asarray(table, dtype=np.int64)
    if t.ndim != 2 or t.shape[0] != t.shape[1] or (t < 0).any():
        raise ValueError("contingency table must be square and non-negative")
    a, b = [], []
    for i in range(t.shape[0]):
        for j in range(t.shape[1]):
            a += [i] * int(t[i, j])
            b += [j] * int(t[i, j])
    return a, b


def cohen_kappa_table(table) -> float:
    return cohen_kappa(*labels_from_table(table))


def fleiss_kappa(counts, n: int | None = None) -> float:
    """Fleiss' kappa of a subjects x categories count matrix whose rows sum to ``n``."""
    m = np.asarray(counts, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] < 1:
        raise ValueError("counts must be a non-empty 2D matrix")
    if (m < 0).any():
        raise ValueError("counts must be non-negative")
    sums = m.sum(axis=1)
    if n is None:
        n = int(sums[0])
    if not np.all(sums == n):
        raise ValueError(f"every subject must have {n} ratings; row sums are {sorted(set(sums.tolist()))}")
    if n < 2:
        raise ValueError("Fleiss' kappa needs at least 2 raters")
    n_subj = m.shape[0]
    p_i = ((m * m).sum(axis=1) - n) / (n * (n - 1))
    p_bar = p_i.mean()
    p_j = m.sum(axis=0) / (n_subj * n)
    p_e = float((p_j * p_j).sum())
    if p_e >= 1.0:
        return 1.0 if p_bar == 1.0 else 0.0
    return float((p_bar - p_e) / (1.0 - p_e))


def read_ratings_csv(path) -> Dict[str, Dict[str, str]]:
    """``subject_id,rater_id,label`` rows into {subject: {rater: label}}."""
    out: Dict[str, Dict[str, str]] = defaultdict(dict)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        need = {"subject_id", "rater_id", "label"}
        if reader.fieldnames is None or not need <= set(reader.fieldnames):
            raise ValueError(f"{path}: header must contain {sorted(need)}")
        for row in reader:
            subj, rater = row["subject_id"], row["rater_id"]
            if rater in out[subj]:
                raise ValueError(f"{path}: rater {rater} rated subject {subj} twice")
            out[subj][rater] = row["label"].strip()
    return dict(out)


def fleiss_counts(ratings: Dict[str, Dict[str, str]]):
    """Count matrix (subjects sorted, categories sorted) from nested ratings."""
    subjects = sorted(ratings)
    cats = sorted({lab for r in ratings.values() for lab in r.values()})
    m = np.zeros((len(subjects), len(cats)), dtype=np.int64)
    for i, s in enumerate(subjects):
        for lab in ratings[s].values():
            m[i, cats.index(lab)] += 1
    return m, subjects, cats


def pairwise_cohen(ratings: Dict[str, Dict[str, str]]) -> Dict[Tuple[str, str], float]:
    """Cohen's kappa for every rater pair over the subjects both rated."""
    raters = sorted({r for v in ratings.values() for r in v})
    out = {}
    for i, ra in enumerate(raters):
        for rb in raters[i + 1:]:
            shared = [s for s in sorted(ratings) if ra in ratings[s] and rb in ratings[s]]
            if shared:
                out[(ra, rb)] = cohen_kappa([ratings[s][ra] for s in shared],
                                            [ratings[s][rb] for s in shared])
    return out
