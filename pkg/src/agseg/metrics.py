"""Pixel confusion counts, segmentation metrics, and fold planning.

Degenerate-case conventions (an empty prediction or mask makes the usual
ratios 0/0): iou, precision, recall, and f1 are 1.0 when prediction and mask
are both empty, 0.0 when exactly one is empty. Accuracy is always defined.

Fold plans shuffle subjects with the given seed and deal them round-robin,
so fold sizes differ by at most one and no subject crosses folds. The
record-wise fallback deals individual records instead (the comparison mode
where one subject's scans can straddle folds).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .data import Manifest, SampleRecord
from .nn import bce_loss


@dataclass
class ConfusionMatrix:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.tp + other.tp, self.fp + other.fp,
                               self.fn + other.fn, self.tn + other.tn)

    def to_dict(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn, "tn": self.tn}

    @classmethod
    def from_dict(cls, d: dict) -> "ConfusionMatrix":
        return cls(tp=int(d["tp"]), fp=int(d["fp"]), fn=int(d["fn"]), tn=int(d["tn"]))


@dataclass
class MetricsReport:
    iou: float
    accuracy: float
    precision: float
    recall: float
    f1: float
    bce: float

    def to_dict(self) -> dict:
        return {"iou": self.iou, "accuracy": self.accuracy, "precision": self.precision,
                "recall": self.recall, "f1": self.f1, "bce": self.bce}

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(**{k: float(d[k]) for k in ("iou", "accuracy", "precision", "recall", "f1", "bce")})


def confusion(pred_prob, mask, threshold: float = 0.5) -> ConfusionMatrix:
    """Exact pixel counts; a pixel is predicted positive iff prob >= threshold."""
    p = pred_prob.data if isinstance(pred_prob, Tensor) else np.asarray(pred_prob)
    m = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
    if p.shape != m.shape:
        raise ValueError(f"confusion: prediction shape {p.shape} != mask shape {m.shape}")
    values = np.unique(m)
    if not np.isin(values, (0.0, 1.0)).all():
        raise ValueError("confusion: mask must be binary")
    pos = p >= threshold
    true = m > 0.5
    tp = int(np.count_nonzero(pos & true))
    fp = int(np.count_nonzero(pos & ~true))
    fn = int(np.count_nonzero(~pos & true))
    tn = int(np.count_nonzero(~pos & ~true))
    return ConfusionMatrix(tp, fp, fn, tn)


def report_from_confusion(cm: ConfusionMatrix, bce: float) -> MetricsReport:
    """Ratio metrics from counts; bce supplied by the caller (it is the one
    metric the counts cannot express)."""
    pred_empty = (cm.tp + cm.fp) == 0
    mask_empty = (cm.tp + cm.fn) == 0
    if pred_empty and mask_empty:
        iou = precision = recall = f1 = 1.0
    elif pred_empty or mask_empty:
        iou = precision = recall = f1 = 0.0
    else:
        iou = cm.tp / (cm.tp + cm.fp + cm.fn)
        precision = cm.tp / (cm.tp + cm.fp)
        recall = cm.tp / (cm.tp + cm.fn)
        f1 = (2 * precision * recall / (precision + recall)) if (precision + recall) > 0 else 0.0
    accuracy = (cm.tp + cm.tn) / cm.total if cm.total else 1.0
    return MetricsReport(iou=iou, accuracy=accuracy, precision=precision,
                         recall=recall, f1=f1, bce=bce)


def metrics(cm: ConfusionMatrix, pred_prob, mask) -> MetricsReport:
    """Ratio metrics from counts plus BCE from the raw probabilities."""
    p = pred_prob if isinstance(pred_prob, Tensor) else Tensor(np.asarray(pred_prob))
    m = mask if isinstance(mask, Tensor) else Tensor(np.asarray(mask))
    return report_from_confusion(cm, bce_loss(p, m).item())


@dataclass
class FoldPlan:
    k: int
    subject_wise: bool
    assignments: dict[str, int]  # subject_id (or record key) -> fold

    def fold_sizes(self) -> list[int]:
        sizes = [0] * self.k
        for f in self.assignments.values():
            sizes[f] += 1
        return sizes


def _record_key(index: int) -> str:
    return f"record:{index}"


def kfold_plan(manifest: Manifest, k: int, seed: int, subject_wise: bool = True) -> FoldPlan:
    """Shuffle units (subjects, or records in the fallback) by seed and deal
    them round-robin into k folds."""
    if k < 2:
        raise ValueError("kfold_plan: k must be >= 2")
    if subject_wise:
        units = manifest.subjects()
        if len(units) < k:
            raise ValueError(f"kfold_plan: k={k} exceeds subject count {len(units)}")
    else:
        units = [_record_key(i) for i in range(len(manifest.records))]
        if len(units) < k:
            raise ValueError(f"kfold_plan: k={k} exceeds record count {len(units)}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(units))
    assignments = {units[int(j)]: i % k for i, j in enumerate(order)}
    return FoldPlan(k=k, subject_wise=subject_wise, assignments=assignments)


def fold_membership(manifest: Manifest, plan: FoldPlan) -> list[int]:
    """Fold index of every record, in manifest order."""
    out = []
    for i, rec in enumerate(manifest.records):
        key = rec.subject_id if plan.subject_wise else _record_key(i)
        out.append(plan.assignments[key])
    return out


def fold_records(manifest: Manifest, plan: FoldPlan, fold: int) -> tuple[list[SampleRecord], list[SampleRecord]]:
    """(train records, held-out records) for one fold."""
    if not 0 <= fold < plan.k:
        raise ValueError(f"fold_records: fold {fold} outside 0..{plan.k - 1}")
    member = fold_membership(manifest, plan)
    train = [r for r, f in zip(manifest.records, member) if f != fold]
    held = [r for r, f in zip(manifest.records, member) if f == fold]
    return train, held


N_PORTIONS = 10
TRAIN_PORTIONS = range(0, 6)
VAL_PORTIONS = range(6, 8)
TEST_PORTIONS = range(8, 10)


def split_622(manifest: Manifest, seed: int) -> tuple[list[SampleRecord], list[SampleRecord], list[SampleRecord]]:
    """Deal subjects into 10 portions; 0-5 train, 6-7 validation, 8-9 test."""
    subjects = manifest.subjects()
    if len(subjects) < N_PORTIONS:
        raise ValueError(f"split_622: needs >= {N_PORTIONS} subjects, got {len(subjects)}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(subjects))
    portion = {subjects[int(j)]: i % N_PORTIONS for i, j in enumerate(order)}
    train = [r for r in manifest.records if portion[r.subject_id] in TRAIN_PORTIONS]
    val = [r for r in manifest.records if portion[r.subject_id] in VAL_PORTIONS]
    test = [r for r in manifest.records if portion[r.subject_id] in TEST_PORTIONS]
    return train, val, test
