"""Ranking and thresholded evaluation for multilabel classifiers.

Average precision follows the ranked-retrieval definition: sort by
descending score (ties broken by original index, so results are
deterministic), then average the precision at each positive's rank.
Thresholded metrics come in two flavors: overall (pooled confusion counts
across all classes) and per-class (averaged over classes).  Degenerate
ratios (empty denominators) score 0 and are flagged rather than hidden.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from mlmargin.tensor import DomainError, ShapeError

__all__ = [
    "EvalReport",
    "ThresholdVector",
    "average_precision",
    "overall_and_per_class",
    "calibrate_thresholds",
    "default_grid",
]


def default_grid() -> np.ndarray:
    """0.01 through 0.99, step 0.01; contains the 0.5 baseline exactly."""
    return np.arange(1, 100) / 100.0


def average_precision(scores, labels) -> float:
    """Mean of precision-at-rank over the positive items.

    Requires at least one positive; callers aggregating over classes should
    catch the error and exclude the class instead of scoring it.
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels, dtype=np.float64).reshape(-1)
    if scores.shape != labels.shape:
        raise ShapeError(f"scores {scores.shape} vs labels {labels.shape}")
    if not np.all((labels == 0) | (labels == 1)):
        raise DomainError("labels must be binary 0/1")
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise DomainError("average precision undefined without positives")
    order = np.argsort(-scores, kind="stable")
    ranked = labels[order]
    hits = np.cumsum(ranked)
    ranks = np.arange(1, scores.size + 1)
    precision_at_pos = (hits / ranks)[ranked == 1]
    return float(precision_at_pos.mean())


@dataclass
class ThresholdVector:
    values: np.ndarray  # (num_classes,)
    flagged: list = field(default_factory=list)  # classes left at 0.5 (no positives)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if np.any((self.values <= 0) | (self.values >= 1)):
            raise DomainError("thresholds must lie strictly inside (0, 1)")

    @classmethod
    def default(cls, num_classes: int) -> "ThresholdVector":
        return cls(values=np.full(num_classes, 0.5))

    def to_dict(self) -> dict:
        return {"thresholds": [float(v) for v in self.values],
                "flagged_classes": list(self.flagged)}

    @classmethod
    def from_dict(cls, payload: dict) -> "ThresholdVector":
        return cls(values=np.asarray(payload["thresholds"], dtype=np.float64),
                   flagged=list(payload.get("flagged_classes", [])))


@dataclass
class EvalReport:
    per_class_ap: list  # float, or None for classes without positives
    per_class_precision: list
    per_class_recall: list
    per_class_f1: list
    mean_ap: float
    overall_precision: float
    overall_recall: float
    overall_f1: float
    class_precision: float
    class_recall: float
    class_f1: float
    thresholds: list
    excluded_classes: list
    degenerate_cells: list

    def to_dict(self) -> dict:
        return {
            "per_class": {
                "AP": self.per_class_ap,
                "precision": self.per_class_precision,
                "recall": self.per_class_recall,
                "F1": self.per_class_f1,
            },
            "mAP": self.mean_ap,
            "OP": self.overall_precision,
            "OR": self.overall_recall,
            "OF1": self.overall_f1,
            "CP": self.class_precision,
            "CR": self.class_recall,
            "CF1": self.class_f1,
            "thresholds": self.thresholds,
            "excluded_classes": self.excluded_classes,
            "degenerate_cells": self.degenerate_cells,
        }

    def to_csv(self) -> str:
        lines = ["class,AP,precision,recall,F1,threshold"]
        for j in range(len(self.per_class_f1)):
            ap = "" if self.per_class_ap[j] is None else repr(self.per_class_ap[j])
            lines.append(
                f"{j},{ap},{self.per_class_precision[j]!r},"
                f"{self.per_class_recall[j]!r},{self.per_class_f1[j]!r},{self.thresholds[j]!r}"
            )
        return "\n".join(lines) + "\n"


def _safe_ratio(num: float, den: float, cell: str, degenerate: list) -> float:
    if den == 0:
        degenerate.append(cell)
        return 0.0
    return num / den


def overall_and_per_class(scores, labels, thr: ThresholdVector | None = None) -> EvalReport:
    """Full evaluation at fixed thresholds: per-class AP plus pooled and
    class-averaged precision/recall/F1.  Predictions are score >= threshold."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if scores.ndim != 2 or scores.shape != labels.shape:
        raise ShapeError(f"need matching rank-2 arrays, got {scores.shape} vs {labels.shape}")
    if not np.all((labels == 0) | (labels == 1)):
        raise DomainError("labels must be binary 0/1")
    _, k = scores.shape
    if thr is None:
        thr = ThresholdVector.default(k)
    if thr.values.shape != (k,):
        raise ShapeError(f"threshold vector length {thr.values.shape[0]} vs {k} classes")

    pred = scores >= thr.values
    pos = labels == 1
    tp = (pred & pos).sum(axis=0).astype(np.float64)
    fp = (pred & ~pos).sum(axis=0).astype(np.float64)
    fn = (~pred & pos).sum(axis=0).astype(np.float64)

    degenerate: list = []
    per_p, per_r, per_f1 = [], [], []
    for j in range(k):
        pj = _safe_ratio(tp[j], tp[j] + fp[j], f"class {j} precision", degenerate)
        rj = _safe_ratio(tp[j], tp[j] + fn[j], f"class {j} recall", degenerate)
        fj = _safe_ratio(2 * pj * rj, pj + rj, f"class {j} F1", degenerate)
        per_p.append(float(pj))
        per_r.append(float(rj))
        per_f1.append(float(fj))

    op = _safe_ratio(tp.sum(), tp.sum() + fp.sum(), "overall precision", degenerate)
    orec = _safe_ratio(tp.sum(), tp.sum() + fn.sum(), "overall recall", degenerate)
    of1 = _safe_ratio(2 * op * orec, op + orec, "overall F1", degenerate)
    cp = float(np.mean(per_p))
    cr = float(np.mean(per_r))
    cf1 = _safe_ratio(2 * cp * cr, cp + cr, "class-mean F1", degenerate)

    per_ap: list = []
    excluded: list = []
    for j in range(k):
        try:
            per_ap.append(average_precision(scores[:, j], labels[:, j]))
        except DomainError:
            per_ap.append(None)
            excluded.append(j)
    valid = [a for a in per_ap if a is not None]
    mean_ap = float(np.mean(valid)) if valid else 0.0

    return EvalReport(
        per_class_ap=per_ap,
        per_class_precision=per_p,
        per_class_recall=per_r,
        per_class_f1=per_f1,
        mean_ap=mean_ap,
        overall_precision=float(op),
        overall_recall=float(orec),
        overall_f1=float(of1),
        class_precision=cp,
        class_recall=cr,
        class_f1=float(cf1),
        thresholds=[float(v) for v in thr.values],
        excluded_classes=excluded,
        degenerate_cells=degenerate,
    )


def _f1_at(scores_j: np.ndarray, labels_j: np.ndarray, t: float) -> float:
    pred = scores_j >= t
    pos = labels_j == 1
    tp = float((pred & pos).sum())
    fp = float((pred & ~pos).sum())
    fn = float((~pred & pos).sum())
    if tp == 0.0:
        return 0.0
    p = tp / (tp + fp)
    r = tp / (tp + fn)
    return 2 * p * r / (p + r)


def calibrate_thresholds(scores, labels, grid=None) -> ThresholdVector:
    """Per-class grid search maximizing F1.

    Ties prefer the threshold closest to 0.5, then the smaller value, so
    calibration is deterministic and never strays from the baseline without
    a strict win.  Classes with no positives keep 0.5 and are flagged.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if scores.ndim != 2 or scores.shape != labels.shape:
        raise ShapeError(f"need matching rank-2 arrays, got {scores.shape} vs {labels.shape}")
    grid = default_grid() if grid is None else np.asarray(grid, dtype=np.float64).reshape(-1)
    if np.any((grid <= 0) | (grid >= 1)):
        raise DomainError("grid thresholds must lie strictly inside (0, 1)")
    if not np.any(grid == 0.5):
        raise DomainError("grid must contain the 0.5 baseline")

    k = scores.shape[1]
    values = np.full(k, 0.5)
    flagged: list = []
    for j in range(k):
        if labels[:, j].sum() == 0:
            flagged.append(j)
            continue
        best_t, best_f1 = None, -1.0
        for t in grid:
            f1 = _f1_at(scores[:, j], labels[:, j], float(t))
            better = f1 > best_f1 + 1e-15
            tie = abs(f1 - best_f1) <= 1e-15
            if better or (tie and _closer_to_half(float(t), best_t)):
                best_t, best_f1 = float(t), f1
        values[j] = best_t
    return ThresholdVector(values=values, flagged=flagged)


def _closer_to_half(t: float, best: float | None) -> bool:
    if best is None:
        return True
    dt, db = abs(t - 0.5), abs(best - 0.5)
    if dt != db:
        return dt < db
    return t < best
