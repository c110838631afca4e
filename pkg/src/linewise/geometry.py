"""Line segments, point sampling, keyline/subline splits, homographies and
ground-truth line correspondences."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

GT_MAX_DISTANCE = 4.0
GT_MAX_ANGLE_DEG = 2.0


@dataclass(frozen=True)
class LineSegment2D:
    x1: float
    y1: float
    x2: float
    y2: float
    id: int = 0

    def __post_init__(self):
        if not self.length > 0:
            raise ValueError(f"degenerate line segment {self}")

    @classmethod
    def from_points(cls, p, q, id: int = 0) -> "LineSegment2D":
        return cls(float(p[0]), float(p[1]), float(q[0]), float(q[1]), int(id))

    @property
    def p_start(self) -> np.ndarray:
        return np.array([self.x1, self.y1])

    @property
    def p_end(self) -> np.ndarray:
        return np.array([self.x2, self.y2])

    @property
    def length(self) -> float:
        return math.hypot(self.x2 - self.x1, self.y2 - self.y1)

    @property
    def direction(self) -> np.ndarray:
        return (self.p_end - self.p_start) / self.length

    def homogeneous_line(self) -> np.ndarray:
        """Coefficients (a, b, c) of the infinite line with a^2 + b^2 = 1."""
        l = np.cross([self.x1, self.y1, 1.0], [self.x2, self.y2, 1.0])
        return l / math.hypot(l[0], l[1])

    def inside(self, width: float, height: float) -> bool:
        return all(0 <= x <= width for x in (self.x1, self.x2)) and all(
            0 <= y <= height for y in (self.y1, self.y2)
        )

    def to_dict(self) -> dict:
        return {"id": self.id, "x1": self.x1, "y1": self.y1, "x2": self.x2, "y2": self.y2}

    @classmethod
    def from_dict(cls, d: dict) -> "LineSegment2D":
        return cls(float(d["x1"]), float(d["y1"]), float(d["x2"]), float(d["y2"]), int(d["id"]))


@dataclass(frozen=True)
class PointToken:
    x: float
    y: float
    c: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.c <= 1.0:
            raise ValueError(f"confidence {self.c} outside [0, 1]")


@dataclass(frozen=True)
class Subline:
    segment: LineSegment2D
    parent_keyline_id: int
    index_within_parent: int
    siblings_count: int


ConfidenceSource = Callable[[float, float], float]


def unit_confidence(x: float, y: float) -> float:
    return 1.0


def token_count(length: float, interval: float) -> int:
    return int(math.floor(length / interval)) + 1


# ---------------------------------------------------------------- sampling


def sample_points(
    line: LineSegment2D,
    interval: float,
    confidence_source: ConfidenceSource | None = None,
    n_min: int = 2,
) -> list[PointToken]:
    """Points every ``interval`` px from ``p_start``: floor(len/interval) + 1 of them."""
    if interval <= 0:
        raise ValueError("sampling interval must be positive")
    n = token_count(line.length, interval)
    if n < n_min:
        raise ValueError(f"line {line.id} of length {line.length:.2f} yields {n} < {n_min} tokens")
    source = confidence_source or unit_confidence
    d = line.direction
    pts = []
    for i in range(n):
        x, y = line.p_start + (i * interval) * d
        pts.append(PointToken(float(x), float(y), float(source(float(x), float(y)))))
    return pts


def split_into_sublines(keyline: LineSegment2D, interval: float, n_max: int) -> list[Subline]:
    """Split a keyline whose token count exceeds ``n_max`` into equal pieces.

    The piece count is ceil(n / n_max); each piece then samples at most
    ``n_max`` tokens because len/(k*interval) < n/k <= n_max.
    """
    if n_max < 2:
        raise ValueError("n_max must be at least 2")
    n = token_count(keyline.length, interval)
    if n <= n_max:
        return [Subline(keyline, keyline.id, 0, 1)]
    k = math.ceil(n / n_max)
    p, q = keyline.p_start, keyline.p_end
    cuts = [p + (i / k) * (q - p) for i in range(k)] + [q]
    return [
        Subline(LineSegment2D.from_points(cuts[i], cuts[i + 1], keyline.id), keyline.id, i, k)
        for i in range(k)
    ]


def build_adjacency(keyline_ids: Sequence[int], sublines: Sequence[Subline]) -> np.ndarray:
    """Row-stochastic keyline x subline matrix with 1/k for each of k children."""
    row_of = {kid: r for r, kid in enumerate(keyline_ids)}
    counts = np.zeros(len(keyline_ids))
    for s in sublines:
        if s.parent_keyline_id not in row_of:
            raise ValueError(f"subline refers to unknown keyline {s.parent_keyline_id}")
        counts[row_of[s.parent_keyline_id]] += 1
    A = np.zeros((len(keyline_ids), len(sublines)))
    for j, s in enumerate(sublines):
        r = row_of[s.parent_keyline_id]
        A[r, j] = 1.0 / counts[r]
    return A


# ---------------------------------------------------------------- homographies


def normalize_homography(H) -> np.ndarray:
    """Scale to unit Frobenius norm with a positive bottom-right entry (when nonzero)."""
    H = np.asarray(H, dtype=np.float64)
    H = H / np.linalg.norm(H)
    if H[2, 2] < 0:
        H = -H
    if abs(np.linalg.det(H)) <= 1e-12:
        raise ValueError("homography is not invertible")
    return H


def project_points(H: np.ndarray, pts: np.ndarray) -> np.ndarray:
    pts = np.atleast_2d(pts)
    ph = np.c_[pts, np.ones(len(pts))] @ np.asarray(H).T
    if np.any(np.abs(ph[:, 2]) <= 1e-9):
        raise ValueError("point maps to infinity")
    return ph[:, :2] / ph[:, 2:3]


def project_line(H: np.ndarray, line: LineSegment2D) -> LineSegment2D:
    p, q = project_points(H, np.array([line.p_start, line.p_end]))
    return LineSegment2D.from_points(p, q, line.id)


# ---------------------------------------------------------------- comparisons


def overlap_similarity(l1: LineSegment2D, l2: LineSegment2D) -> float:
    """1-D overlap of the two segments on l1's infinite line over the shorter length."""
    # Positions in units of l1's length, so l1 spans exactly [0, 1].
    d = l1.p_end - l1.p_start
    dd = float(np.dot(d, d))
    t3 = float(np.dot(l2.p_start - l1.p_start, d)) / dd
    t4 = float(np.dot(l2.p_end - l1.p_start, d)) / dd
    lo, hi = max(0.0, min(t3, t4)), min(1.0, max(t3, t4))
    if hi <= lo:
        return 0.0
    len1, len2 = l1.length, l2.length
    ratio = (hi - lo) if len1 <= len2 else (hi - lo) * len1 / len2
    return min(1.0, max(0.0, ratio))


def folded_angle(line: LineSegment2D) -> float:
    theta = math.atan2(line.y2 - line.y1, line.x2 - line.x1) % math.pi
    return 0.0 if theta >= math.pi else theta


def angle_difference(l1: LineSegment2D, l2: LineSegment2D) -> float:
    d = abs(folded_angle(l1) - folded_angle(l2))
    return min(d, math.pi - d)


def point_line_distance(points: np.ndarray, line: LineSegment2D) -> np.ndarray:
    a, b, c = line.homogeneous_line()
    pts = np.atleast_2d(points)
    return np.abs(a * pts[:, 0] + b * pts[:, 1] + c)


def mean_endpoint_distance(l1: LineSegment2D, l2: LineSegment2D) -> float:
    """Mean perpendicular distance of l1's endpoints to l2's infinite line."""
    return float(point_line_distance(np.array([l1.p_start, l1.p_end]), l2).mean())


def gt_correspondences(
    lines1: Sequence[LineSegment2D],
    lines2: Sequence[LineSegment2D],
    H: np.ndarray,
    max_distance: float = GT_MAX_DISTANCE,
    max_angle_deg: float = GT_MAX_ANGLE_DEG,
) -> np.ndarray:
    """Overlap-similarity matrix of true correspondences (rows: lines1).

    A pair counts when, after mapping lines1 into image 2 with ``H``, the
    segments overlap, the projected endpoints lie within ``max_distance`` px
    (mean) of the candidate's infinite line, and the angles differ by less
    than ``max_angle_deg``.
    """
    max_angle = math.radians(max_angle_deg)
    gt = np.zeros((len(lines1), len(lines2)))
    for i, l1 in enumerate(lines1):
        try:
            p = project_line(H, l1)
        except ValueError:
            continue
        for j, l2 in enumerate(lines2):
            if angle_difference(p, l2) >= max_angle:
                continue
            if mean_endpoint_distance(p, l2) >= max_distance:
                continue
            gt[i, j] = overlap_similarity(p, l2)
    return gt


def line_attributes(line: LineSegment2D) -> tuple[float, float, float, float, float]:
    """(mid_x, mid_y, length, cos theta, sin theta) with theta folded to [0, pi)."""
    theta = folded_angle(line)
    return (
        0.5 * (line.x1 + line.x2),
        0.5 * (line.y1 + line.y2),
        line.length,
        math.cos(theta),
        math.sin(theta),
    )


def clip_to_image(line: LineSegment2D, width: float, height: float) -> LineSegment2D | None:
    """Liang-Barsky clip to [0, width] x [0, height]; None when nothing is left."""
    p, d = line.p_start, line.p_end - line.p_start
    t0, t1 = 0.0, 1.0
    for pk, qk in ((-d[0], p[0]), (d[0], width - p[0]), (-d[1], p[1]), (d[1], height - p[1])):
        if pk == 0:
            if qk < 0:
                return None
            continue
        r = qk / pk
        if pk < 0:
            t0 = max(t0, r)
        else:
            t1 = min(t1, r)
        if t0 > t1:
            return None
    a, b = p + t0 * d, p + t1 * d
    if np.hypot(*(b - a)) <= 0:
        return None
    a = np.clip(a, 0, [width, height])
    b = np.clip(b, 0, [width, height])
    if np.hypot(*(b - a)) <= 0:
        return None
    return LineSegment2D.from_points(a, b, line.id)


# ---------------------------------------------------------------- files


def save_lines(path, lines: Iterable[LineSegment2D]) -> None:
    Path(path).write_text(json.dumps([l.to_dict() for l in lines]))


def load_lines(path) -> list[LineSegment2D]:
    raw = json.loads(Path(path).read_text())
    if not isinstance(raw, list):
        raise ValueError("line-set file must hold a JSON array")
    return [LineSegment2D.from_dict(d) for d in raw]
