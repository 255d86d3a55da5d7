"""Group fairness (EOpp0, EOpp1, EOdd) and predictive performance metrics.

Rates use one-vs-rest binarisation per class with EPS added to every
denominator, so a class absent from a group yields rate 0 instead of failing.
Aggregates are averaged over classes in class order with plain float
arithmetic.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Iterable, NamedTuple

import numpy as np

EPS = 1e-9


class EvalRecord(NamedTuple):
    true: int
    pred: int
    group: int
    fitzpatrick: int | None = None


@dataclass
class GroupCounts:
    """One-vs-rest confusion counts indexed [class][group]."""
    tp: list[list[int]]
    fp: list[list[int]]
    tn: list[list[int]]
    fn: list[list[int]]

    @property
    def num_classes(self) -> int:
        return len(self.tp)


def _arrays(records) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    recs = list(records)
    if not recs:
        raise ValueError("no evaluation records")
    arr = np.asarray([(r[0], r[1], r[2]) for r in recs], dtype=np.int64)
    return arr[:, 0], arr[:, 1], arr[:, 2]


def confusion_by_group(records: Iterable, num_classes: int) -> GroupCounts:
    y, p, s = _arrays(records)
    if y.min() < 0 or y.max() >= num_classes or p.min() < 0 or p.max() >= num_classes:
        raise ValueError("class index out of range")
    if not np.isin(s, (0, 1)).all():
        raise ValueError("group must be 0 or 1")
    tp, fp, tn, fn = ([[0, 0] for _ in range(num_classes)] for _ in range(4))
    for k in range(num_classes):
        for g in (0, 1):
            m = s == g
            pos, hit = y[m] == k, p[m] == k
            tp[k][g] = int(np.sum(pos & hit))
            fn[k][g] = int(np.sum(pos & ~hit))
            fp[k][g] = int(np.sum(~pos & hit))
            tn[k][g] = int(np.sum(~pos & ~hit))
    return GroupCounts(tp, fp, tn, fn)


def rates(counts: GroupCounts) -> dict[str, list[list[float]]]:
    tnr, tpr, fpr = [], [], []
    for k in range(counts.num_classes):
        tnr.append([counts.tn[k][g] / (counts.tn[k][g] + counts.fp[k][g] + EPS) for g in (0, 1)])
        tpr.append([counts.tp[k][g] / (counts.tp[k][g] + counts.fn[k][g] + EPS) for g in (0, 1)])
        fpr.append([counts.fp[k][g] / (counts.fp[k][g] + counts.tn[k][g] + EPS) for g in (0, 1)])
    return {"tnr": tnr, "tpr": tpr, "fpr": fpr}


@dataclass
class FairnessReport:
    num_classes: int
    counts: GroupCounts
    tnr: list[list[float]]
    tpr: list[list[float]]
    fpr: list[list[float]]
    eopp0: float
    eopp1: float
    eodd: float

    def to_dict(self) -> dict:
        return asdict(self)


def fairness(records: Iterable, num_classes: int) -> FairnessReport:
    records = list(records)
    _, _, s = _arrays(records)
    if not (s == 0).any() or not (s == 1).any():
        raise ValueError("both groups must be present to measure fairness")
    counts = confusion_by_group(records, num_classes)
    r = rates(counts)
    e0 = e1 = eo = 0.0
    for k in range(num_classes):
        d_tnr = abs(r["tnr"][k][0] - r["tnr"][k][1])
        d_tpr = abs(r["tpr"][k][0] - r["tpr"][k][1])
        d_fpr = abs(r["fpr"][k][0] - r["fpr"][k][1])
        e0 += d_tnr
        e1 += d_tpr
        eo += d_tpr + d_fpr
    return FairnessReport(num_classes, counts, r["tnr"], r["tpr"], r["fpr"],
                          e0 / num_classes, e1 / num_classes, eo / num_classes)


@dataclass
class PerformanceReport:
    accuracy: float          # micro
    precision: float         # macro
    recall: float            # macro
    f1: float                # macro
    per_class_f1: list[float]

    def to_dict(self) -> dict:
        return asdict(self)


def performance(records: Iterable, num_classes: int) -> PerformanceReport:
    y, p, _ = _arrays(records)
    precs, recs, f1s = [], [], []
    for k in range(num_classes):
        tp = int(np.sum((y == k) & (p == k)))
        fp = int(np.sum((y != k) & (p == k)))
        fn = int(np.sum((y == k) & (p != k)))
        pr = tp / (tp + fp + EPS)
        rc = tp / (tp + fn + EPS)
        precs.append(pr)
        recs.append(rc)
        f1s.append(2 * pr * rc / (pr + rc + EPS))
    return PerformanceReport(float(np.mean(y == p)), sum(precs) / num_classes,
                             sum(recs) / num_classes, sum(f1s) / num_classes, f1s)


def macro_f1(y_true, y_pred, num_classes: int) -> float:
    recs = [(int(a), int(b), 0) for a, b in zip(y_true, y_pred)]
    return performance(recs, num_classes).f1


def evaluation_document(records, num_classes: int) -> dict:
    """Fairness + performance bundle written by the ``eval`` command."""
    fr = fairness(records, num_classes)
    pr = performance(records, num_classes)
    return {"schema": "skewprune.eval/1", "num_classes": num_classes, "n": len(list(records)),
            "performance": pr.to_dict(), "fairness": fr.to_dict()}


def dumps(doc: dict) -> str:
    return json.dumps(doc, indent=1)
