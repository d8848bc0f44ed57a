"""
From per-stack fracture probabilities to vertebra and patient decisions.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Dict, List, Sequence

import numpy as np

from .errors import ArityError, CompletenessError

N_STACKS = 15
N_VERTEBRAE = 7
MODELS = ("A", "B")
BCE_EPS = 1e-7


@dataclass(frozen=True)
class AdaptiveParams:
    thr_low: float = 0.4
    thr_high: float = 0.6
    d_ref: float = 0.2

    def __post_init__(self):
        if not (0 < self.thr_low <= self.thr_high < 1):
            raise ValueError("need 0 < thr_low <= thr_high < 1")
        if not self.d_ref > 0:
            raise ValueError("d_ref must be positive")


@dataclass(frozen=True)
class AdaptiveDecision:
    decision: bool
    score: float
    threshold: float
    disagreement: float


def _probs(values, n, name="probabilities"):
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1 or arr.size != n:
        raise ArityError(f"expected {n} {name}, got {arr.size}")
    if ((arr < 0) | (arr > 1)).any() or not np.isfinite(arr).all():
        raise ValueError(f"{name} must lie in [0, 1]")
    return arr


def majority_vote(probs: Sequence[float], thr: float = 0.5) -> bool:
    """Fractured iff at least 8 of the 15 stack probabilities exceed ``thr``."""
    p = _probs(probs, N_STACKS)
    return int(np.count_nonzero(p > thr)) >= N_STACKS // 2 + 1


def score_fuse(probs_a: Sequence[float], probs_b: Sequence[float], weight: float = 0.5) -> np.ndarray:
    a = _probs(probs_a, N_STACKS)
    b = _probs(probs_b, N_STACKS)
    if not 0 <= weight <= 1:
        raise ValueError("fusion weight must lie in [0, 1]")
    return weight * a + (1.0 - weight) * b


def patient_if_any(vertebra_decisions: Sequence[bool]) -> bool:
    d = list(vertebra_decisions)
    if len(d) != N_VERTEBRAE:
        raise ArityError(f"expected {N_VERTEBRAE} vertebra decisions, got {len(d)}")
    return any(bool(v) for v in d)


def adaptive_threshold(disagreement: float, params: AdaptiveParams = AdaptiveParams()) -> float:
    """Clamped linear ramp from thr_low (full agreement) to thr_high (d >= d_ref)."""
    frac = min(disagreement / params.d_ref, 1.0)
    return params.thr_low + (params.thr_high - params.thr_low) * frac


def patient_adaptive_from_arrays(probs_a, probs_b, params: AdaptiveParams = AdaptiveParams()) -> AdaptiveDecision:
    """``probs_a``/``probs_b`` are (7, 15) arrays of stack probabilities."""
    a = np.asarray(probs_a, dtype=np.float64)
    b = np.asarray(probs_b, dtype=np.float64)
    if a.shape != (N_VERTEBRAE, N_STACKS) or b.shape != a.shape:
        raise CompletenessError(f"expected (7, 15) probabilities per model, got {a.shape} and {b.shape}")
    # correctly rounded sums keep hand-computed examples exact
    mean_a = np.array([math.fsum(row) for row in a]) / N_STACKS
    mean_b = np.array([math.fsum(row) for row in b]) / N_STACKS
    unified = (mean_a + mean_b) / 2.0
    score = float(unified.max())
    d = math.fsum(np.abs(mean_a - mean_b)) / N_VERTEBRAE
    thr = adaptive_threshold(d, params)
    return AdaptiveDecision(score > thr, score, thr, d)


# ---------------------------------------------------------------- prediction tables

class PredictionTable:
    """Rows of (patient_id, vertebra, stack_index, model, prob)."""

    def __init__(self, rows=()):
        self._rows: Dict[tuple, float] = {}
        for r in rows:
            self.add(*r)

    def add(self, patient_id, vertebra, stack_index, model, prob):
        vertebra, stack_index, prob = int(vertebra), int(stack_index), float(prob)
        if not 1 <= vertebra <= N_VERTEBRAE:
            raise ValueError(f"vertebra {vertebra} outside 1..7")
        if not 0 <= stack_index < N_STACKS:
            raise ValueError(f"stack index {stack_index} outside 0..14")
        if not (0.0 <= prob <= 1.0):
            raise ValueError(f"probability {prob} outside [0, 1]")
        key = (str(patient_id), vertebra, stack_index, str(model))
        if key in self._rows:
            raise ValueError(f"duplicate prediction row {key}")
        self._rows[key] = prob

    def __len__(self):
        return len(self._rows)

    def patients(self) -> List[str]:
        return sorted({k[0] for k in self._rows})

    def models(self, patient_id=None) -> List[str]:
        return sorted({k[3] for k in self._rows if patient_id is None or k[0] == patient_id})

    def array(self, patient_id, model) -> np.ndarray:
        """(7, 15) probabilities for one patient and model; raises if incomplete."""
        out = np.full((N_VERTEBRAE, N_STACKS), np.nan)
        for (pid, v, s, m), p in self._rows.items():
            if pid == patient_id and m == model:
                out[v - 1, s] = p
        if np.isnan(out).any():
            missing = [(v + 1, s) for v, s in np.argwhere(np.isnan(out))]
            raise CompletenessError(
                f"patient {patient_id} model {model}: {len(missing)} missing (vertebra, stack) rows, "
                f"first {missing[0]}")
        return out

    @classmethod
    def from_csv(cls, path) -> "PredictionTable":
        table = cls()
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            need = {"patient_id", "vertebra", "stack_index", "model", "prob"}
            if reader.fieldnames is None or not need <= set(reader.fieldnames):
                raise ValueError(f"{path}: header must contain {sorted(need)}")
            for row in reader:
                table.add(row["patient_id"], row["vertebra"], row["stack_index"], row["model"], row["prob"])
        return table

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["patient_id", "vertebra", "stack_index", "model", "prob"])
            for (pid, v, s, m), p in sorted(self._rows.items()):
                w.writerow([pid, v, s, m, repr(p)])


def patient_adaptive(table: PredictionTable, patient_id: str,
                     params: AdaptiveParams = AdaptiveParams()) -> AdaptiveDecision:
    return patient_adaptive_from_arrays(table.array(patient_id, "A"), table.array(patient_id, "B"), params)


def decide_patient(table: PredictionTable, patient_id: str, mode: str = "adaptive",
                   params: AdaptiveParams = AdaptiveParams(), vote_thr: float = 0.5,
                   weight: float = 0.5) -> dict:
    """Decision record for one patient.

    Vertebra decisions vote over fused probabilities when both models are
    present, otherwise over the single model's probabilities.
    """
    models = table.models(patient_id)
    if set(MODELS) <= set(models):
        a, b = table.array(patient_id, "A"), table.array(patient_id, "B")
        per_vert = [score_fuse(a[v], b[v], weight) for v in range(N_VERTEBRAE)]
    elif len(models) == 1:
        a = table.array(patient_id, models[0])
        per_vert = list(a)
    else:
        raise CompletenessError(f"patient {patient_id}: unexpected models {models}")
    votes = [majority_vote(p, vote_thr) for p in per_vert]
    rec = {
        "patient_id": patient_id,
        "vertebra_decisions": votes,
        "patient_if_any": patient_if_any(votes),
        "patient_adaptive": None,
        "score": None,
        "threshold": None,
    }
    if mode == "adaptive":
        res = patient_adaptive(table, patient_id, params)
        rec.update(patient_adaptive=res.decision, score=res.score, threshold=res.threshold)
    elif mode != "if-any":
        raise ValueError(f"unknown aggregation mode {mode!r}")
    return rec


def weighted_bce(y: Sequence[int], yhat: Sequence[float], pos_weight: float = 2.0) -> float:
    """Class-weighted binary cross-entropy normalised by the total weight."""
    y_arr = np.asarray(y, dtype=np.float64)
    p = np.asarray(yhat, dtype=np.float64)
    if y_arr.size == 0:
        raise ValueError("weighted_bce of an empty batch")
    if y_arr.shape != p.shape:
        raise ArityError(f"labels {y_arr.shape} and probabilities {p.shape} differ in shape")
    if not np.isin(y_arr, (0.0, 1.0)).all():
        raise ValueError("labels must be 0 or 1")
    p = np.clip(p, BCE_EPS, 1.0 - BCE_EPS)
    w = np.where(y_arr == 1.0, pos_weight, 1.0)
    ll = y_arr * np.log(p) + (1.0 - y_arr) * np.log1p(-p)
    return float(-(w * ll).sum() / w.sum())

