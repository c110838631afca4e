"""Descriptor distances, subline-to-keyline aggregation, NN matching and P/R."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


@dataclass
class DistanceMatrix:
    values: np.ndarray
    row_ids: list[int]
    col_ids: list[int]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (len(self.row_ids), len(self.col_ids)):
            raise ValueError("distance matrix shape does not match its id lists")
        if not np.all(np.isfinite(self.values)) or np.any(self.values < 0):
            raise ValueError("distances must be finite and non-negative")


@dataclass
class MatchSet:
    pairs: list[tuple[int, int, float]]
    policy: str = "mutual"

    def id_pairs(self) -> set[tuple[int, int]]:
        return {(a, b) for a, b, _ in self.pairs}

    def __len__(self) -> int:
        return len(self.pairs)


@dataclass
class MetricsReport:
    precision: float
    recall: float
    f_score: float
    true_positives: int
    false_positives: int
    false_negatives: int
    predicted: int
    matchable: int
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {
            "precision": self.precision,
            "recall": self.recall,
            "f_score": self.f_score,
            "true_positives": self.true_positives,
            "false_positives": self.false_positives,
            "false_negatives": self.false_negatives,
            "predicted": self.predicted,
            "matchable": self.matchable,
        }
        d.update(self.extra)
        return d


def f_score(p: float, r: float) -> float:
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


def subline_distances(desc1: np.ndarray, desc2: np.ndarray, ids1=None, ids2=None) -> DistanceMatrix:
    """Euclidean distances between descriptor rows.

    For unit rows this equals sqrt(2 - 2 cos); the difference form is used
    because it stays exact near zero.
    """
    desc1, desc2 = np.atleast_2d(desc1), np.atleast_2d(desc2)
    if desc1.shape[1] != desc2.shape[1]:
        raise ValueError(f"descriptor dimensions differ: {desc1.shape[1]} vs {desc2.shape[1]}")
    diff = desc1[:, None, :] - desc2[None, :, :]
    sq = (diff * diff).sum(axis=-1)
    ids1 = list(range(len(desc1))) if ids1 is None else list(ids1)
    ids2 = list(range(len(desc2))) if ids2 is None else list(ids2)
    return DistanceMatrix(np.sqrt(sq), ids1, ids2)


def keyline_distances(A1: np.ndarray, C_sub: DistanceMatrix, A2: np.ndarray, ids1=None, ids2=None) -> DistanceMatrix:
    """Average subline distances per keyline pair: A1 C A2^T."""
    A1, A2 = np.asarray(A1), np.asarray(A2)
    if A1.shape[1] != C_sub.values.shape[0] or A2.shape[1] != C_sub.values.shape[1]:
        raise ValueError(f"adjacency shapes {A1.shape}, {A2.shape} do not chain with {C_sub.values.shape}")
    ids1 = list(range(A1.shape[0])) if ids1 is None else list(ids1)
    ids2 = list(range(A2.shape[0])) if ids2 is None else list(ids2)
    return DistanceMatrix(A1 @ C_sub.values @ A2.T, ids1, ids2)


def _argmin_rows(values: np.ndarray) -> np.ndarray:
    # np.argmin returns the first minimum, i.e. the lowest column on ties.
    return np.argmin(values, axis=1)


def match_nearest(C: DistanceMatrix, mutual: bool = True, max_distance: float | None = None) -> MatchSet:
    values = C.values
    if values.size == 0:
        raise ValueError("cannot match an empty distance matrix")
    fwd = _argmin_rows(values)
    back = _argmin_rows(values.T) if mutual else None
    pairs = []
    for i, j in enumerate(fwd):
        if mutual and back[j] != i:
            continue
        d = float(values[i, j])
        if max_distance is not None and d > max_distance:
            continue
        pairs.append((C.row_ids[i], C.col_ids[j], d))
    return MatchSet(pairs, "mutual" if mutual else "nearest")


def precision_recall(
    matches: MatchSet, gt: np.ndarray, ids1: Sequence[int], ids2: Sequence[int], anchors: Sequence[int] | None = None
) -> MetricsReport:
    """Score predicted keyline pairs against an overlap matrix.

    Recall is per anchor: the fraction of image-1 lines having any positive
    that received at least one correct prediction. ``anchors`` restricts
    scoring to a subset of image-1 ids.
    """
    row = {k: i for i, k in enumerate(ids1)}
    col = {k: j for j, k in enumerate(ids2)}
    gt = np.asarray(gt)
    keep = set(ids1) if anchors is None else set(anchors)
    tp = fp = 0
    hit = set()
    for a, b, _ in matches.pairs:
        if a not in keep:
            continue
        if gt[row[a], col[b]] > 0:
            tp += 1
            hit.add(a)
        else:
            fp += 1
    matchable = {k for k in keep if np.any(gt[row[k]] > 0)}
    predicted = tp + fp
    p = tp / predicted if predicted else 0.0
    r = len(hit & matchable) / len(matchable) if matchable else 0.0
    return MetricsReport(p, r, f_score(p, r), tp, fp, len(matchable - hit), predicted, len(matchable))


def pool_reports(reports: Sequence[MetricsReport]) -> MetricsReport:
    """Micro-average: sum counts over pairs, then recompute P/R/F."""
    tp = sum(r.true_positives for r in reports)
    pred = sum(r.predicted for r in reports)
    matchable = sum(r.matchable for r in reports)
    hits = sum(r.matchable - r.false_negatives for r in reports)
    p = tp / pred if pred else 0.0
    rec = hits / matchable if matchable else 0.0
    return MetricsReport(p, rec, f_score(p, rec), tp, pred - tp, matchable - hits, pred, matchable)
