"""Average precision per class and macro mAP.

Equal scores form a single threshold step, matching the usual
precision-recall-curve construction in common metric libraries.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DataError, InputError


@dataclass(frozen=True, eq=False)
class PrecisionRecallCurve:
    thresholds: np.ndarray  # unique scores, descending
    precision: np.ndarray
    recall: np.ndarray


def _as_pair(scores, targets) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).ravel()
    t = np.asarray(targets).ravel()
    if s.shape != t.shape:
        raise InputError(f"scores and targets differ in length: {s.shape[0]} vs {t.shape[0]}")
    if not np.all(np.isfinite(s)):
        raise InputError("scores contain non-finite values")
    if not np.all((t == 0) | (t == 1)):
        raise InputError("targets must be 0/1")
    return s, t.astype(np.int64)


def precision_recall_curve(scores, targets) -> PrecisionRecallCurve:
    s, t = _as_pair(scores, targets)
    n_pos = int(t.sum())
    order = np.argsort(-s, kind="stable")
    s, t = s[order], t[order]
    tps = np.cumsum(t)
    # last position of every run of tied scores
    ends = np.r_[np.flatnonzero(np.diff(s)), s.size - 1] if s.size else np.array([], dtype=int)
    tp = tps[ends].astype(np.float64)
    precision = tp / (ends + 1)
    recall = tp / n_pos if n_pos else np.full_like(tp, np.nan)
    return PrecisionRecallCurve(s[ends], precision, recall)


def average_precision(scores, targets) -> float:
    """AP = sum_k (R_k - R_{k-1}) * P_k over descending unique thresholds.

    Returns NaN when there are no positive targets, since AP is undefined.
    """
    curve = precision_recall_curve(scores, targets)
    if curve.recall.size == 0 or np.isnan(curve.recall[-1]):
        return math.nan
    steps = np.diff(np.r_[0.0, curve.recall])
    return float(np.sum(steps * curve.precision))


@dataclass
class ClasswiseReport:
    per_class: dict[str, float]
    excluded: list[str] = field(default_factory=list)

    @property
    def map(self) -> float:
        return float(np.mean(list(self.per_class.values())))

    def to_dict(self) -> dict:
        return {"map": self.map, "per_class": dict(self.per_class), "excluded": list(self.excluded)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def mean_average_precision(score_matrix, target_matrix,
                           class_names: Sequence[str] | None = None) -> ClasswiseReport:
    """Macro mean of per-class AP over the classes that have any positive."""
    scores = np.asarray(score_matrix, dtype=np.float64)
    targets = np.asarray(target_matrix)
    if scores.ndim == 1:
        scores, targets = scores[:, None], targets.reshape(-1, 1)
    if scores.shape != targets.shape:
        raise InputError(f"score matrix {scores.shape} and target matrix {targets.shape} differ")
    n_classes = scores.shape[1]
    names = list(class_names) if class_names is not None else [str(i) for i in range(n_classes)]
    if len(names) != n_classes:
        raise InputError(f"{len(names)} class names for {n_classes} columns")
    per_class, excluded = {}, []
    for j, name in enumerate(names):
        ap = average_precision(scores[:, j], targets[:, j])
        if math.isnan(ap):
            excluded.append(name)
        else:
            per_class[name] = ap
    if not per_class:
        raise DataError("no class has a positive target; mAP is undefined")
    return ClasswiseReport(per_class, excluded)


def map_score(score_matrix, target_matrix) -> float:
    return mean_average_precision(score_matrix, target_matrix).map
