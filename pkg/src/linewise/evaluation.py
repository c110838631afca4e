"""Dataset-level matching and homography evaluation."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .estimation import AUCReport, EstimationError, RansacConfig, auc, corner_error, ransac_homography
from .matching import MatchSet, MetricsReport, keyline_distances, match_nearest, pool_reports, precision_recall, subline_distances
from .model import ModelConfig, describe_image
from .tensor import ParameterSet
from .training import TrainingPair

TERCILES = ("short", "mid", "long")


@dataclass
class PairMatches:
    ids1: list[int]
    ids2: list[int]
    lengths1: list[float]
    gt: np.ndarray  # restricted to the described keylines
    matches: MatchSet


def match_pair(pair: TrainingPair, params: ParameterSet, config: ModelConfig) -> PairMatches:
    """Describe both views, aggregate subline distances to keylines and match mutually."""
    s1 = describe_image(pair.lines1, pair.map1, params, config)
    s2 = describe_image(pair.lines2, pair.map2, params, config)
    C = subline_distances(s1.descriptors.data, s2.descriptors.data)
    K = keyline_distances(s1.adjacency, C, s2.adjacency, s1.keyline_ids, s2.keyline_ids)
    row = {l.id: i for i, l in enumerate(pair.lines1)}
    col = {l.id: j for j, l in enumerate(pair.lines2)}
    gt = pair.gt[np.ix_([row[k] for k in s1.keyline_ids], [col[k] for k in s2.keyline_ids])]
    return PairMatches(s1.keyline_ids, s2.keyline_ids, [k.length for k in s1.keylines], gt, match_nearest(K))


def _map(fn, items, threads: int):
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(threads) as pool:
        return list(pool.map(fn, items))


def match_dataset(pairs: Sequence[TrainingPair], params, config, threads: int = 1) -> list[PairMatches]:
    if len(pairs) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    return _map(lambda p: match_pair(p, params, config), list(pairs), threads)


def tercile_edges(lengths: Sequence[float]) -> tuple[float, float]:
    lengths = np.sort(np.asarray(lengths, dtype=np.float64))
    n = len(lengths)
    return float(lengths[n // 3]), float(lengths[(2 * n) // 3])


def tercile_of(length: float, edges: tuple[float, float]) -> str:
    return "short" if length < edges[0] else ("mid" if length < edges[1] else "long")


@dataclass
class MatchEvaluation:
    overall: MetricsReport
    terciles: dict[str, MetricsReport]
    edges: tuple[float, float]
    tercile_counts: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "overall": self.overall.to_dict(),
            "terciles": {k: v.to_dict() for k, v in self.terciles.items()},
            "tercile_edges_px": list(self.edges),
            "tercile_counts": self.tercile_counts,
        }


def evaluate_matches(results: Sequence[PairMatches]) -> MatchEvaluation:
    """Pooled P/R/F overall and per length tercile of the image-1 keylines."""
    edges = tercile_edges([x for r in results for x in r.lengths1])
    overall = pool_reports([precision_recall(r.matches, r.gt, r.ids1, r.ids2) for r in results])
    per, counts = {}, {}
    for name in TERCILES:
        reports = []
        counts[name] = 0
        for r in results:
            anchors = [i for i, ln in zip(r.ids1, r.lengths1) if tercile_of(ln, edges) == name]
            counts[name] += len(anchors)
            reports.append(precision_recall(r.matches, r.gt, r.ids1, r.ids2, anchors))
        per[name] = pool_reports(reports)
    return MatchEvaluation(overall, per, edges, counts)


def pair_corner_error(
    pair: TrainingPair, result: PairMatches, ransac: RansacConfig, width: float, height: float
) -> float:
    """Corner error of the RANSAC homography from predicted matches; inf on failure."""
    i1 = {l.id: i for i, l in enumerate(pair.lines1)}
    i2 = {l.id: j for j, l in enumerate(pair.lines2)}
    idx = [(i1[a], i2[b]) for a, b, _ in result.matches.pairs]
    try:
        est = ransac_homography(idx, pair.lines1, pair.lines2, ransac)
        return corner_error(est.H, pair.H, width, height)
    except (EstimationError, ValueError):
        return float("inf")


def evaluate_homography(
    pairs: Sequence[TrainingPair],
    results: Sequence[PairMatches],
    ransac: RansacConfig,
    width: float,
    height: float,
    threads: int = 1,
) -> AUCReport:
    errors = _map(
        lambda k: pair_corner_error(pairs[k], results[k], ransac, width, height), range(len(pairs)), threads
    )
    return auc(errors)
