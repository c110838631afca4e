"""Homography estimation from line correspondences and corner-error AUC."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .geometry import LineSegment2D, normalize_homography, project_points

AUC_THRESHOLDS = (5.0, 10.0, 20.0)
AUC_CONVENTION = "AUC(t) = (1/t) * integral_0^t F(e) de with F the empirical CDF of corner errors (exact, failures = inf)"


class EstimationError(ValueError):
    pass


@dataclass
class RansacConfig:
    iterations: int = 2000
    threshold: float = 4.0
    sample_size: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("RANSAC needs at least one iteration")
        if not self.threshold > 0:
            raise ValueError("RANSAC threshold must be positive")
        if self.sample_size < 4:
            raise ValueError("a line homography needs at least 4 correspondences")


@dataclass
class HomographyEstimate:
    H: np.ndarray
    inliers: list[int]
    mean_residual: float


@dataclass
class AUCReport:
    thresholds: tuple[float, ...]
    values: dict[float, float]
    errors: list[float]
    convention: str = AUC_CONVENTION

    def to_dict(self) -> dict:
        finite = [e for e in self.errors if np.isfinite(e)]
        return {
            "convention": self.convention,
            "auc": {f"{t:g}px": v for t, v in self.values.items()},
            "n_pairs": len(self.errors),
            "n_failures": len(self.errors) - len(finite),
            "median_error": float(np.median(self.errors)) if self.errors else None,
        }

    def curve(self) -> list[tuple[float, float]]:
        """Points (error, fraction of pairs with error <= it) of the cumulative curve."""
        e = np.sort(np.asarray(self.errors, dtype=np.float64))
        n = len(e)
        return [(float(x), (i + 1) / n) for i, x in enumerate(e) if np.isfinite(x)]


# ---------------------------------------------------------------- DLT


def _hartley(points: np.ndarray) -> np.ndarray:
    c = points.mean(axis=0)
    d = np.sqrt(((points - c) ** 2).sum(axis=1)).mean()
    s = np.sqrt(2) / d if d > 0 else 1.0
    return np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1.0]])


def _endpoints(lines: Sequence[LineSegment2D]) -> np.ndarray:
    return np.array([[[l.x1, l.y1], [l.x2, l.y2]] for l in lines], dtype=np.float64)


def _homogenize(p: np.ndarray) -> np.ndarray:
    return np.concatenate([p, np.ones(p.shape[:-1] + (1,))], axis=-1)


class _NormalizedPairs:
    """Endpoints of image-1 lines and infinite lines of image-2 lines in
    Hartley-normalized coordinates."""

    def __init__(self, lines1, lines2, T1=None, T2=None):
        e1, e2 = _endpoints(lines1), _endpoints(lines2)
        self.T1 = _hartley(e1.reshape(-1, 2)) if T1 is None else T1
        self.T2 = _hartley(e2.reshape(-1, 2)) if T2 is None else T2
        self.p1 = _homogenize(e1) @ self.T1.T  # (N, 2, 3)
        q = _homogenize(e2) @ self.T2.T
        l2 = np.cross(q[:, 0], q[:, 1])
        self.l2 = l2 / np.linalg.norm(l2[:, :2], axis=1, keepdims=True)  # (N, 3)

    def design(self, idx: np.ndarray) -> np.ndarray:
        """Rows outer(l2, p).ravel() for both endpoints of each selected pair."""
        l = self.l2[idx]  # (..., k, 3)
        p = self.p1[idx]  # (..., k, 2, 3)
        rows = l[..., None, :, None] * p[..., :, None, :]  # (..., k, 2, 3, 3)
        return rows.reshape(idx.shape[:-1] + (2 * idx.shape[-1], 9))

    def denormalize(self, Hn: np.ndarray) -> np.ndarray:
        return np.linalg.inv(self.T2) @ Hn @ self.T1


def _solve(A: np.ndarray, rank_tol: float = 1e-10) -> tuple[np.ndarray, np.ndarray]:
    """Null vectors of (batched) design matrices and a rank-deficiency flag."""
    _, s, vt = np.linalg.svd(A, full_matrices=True)
    degenerate = s[..., 7] <= rank_tol * s[..., 0]
    return vt[..., -1, :].reshape(A.shape[:-2] + (3, 3)), degenerate


def dlt_from_lines(pairs: Sequence[tuple[LineSegment2D, LineSegment2D]]) -> np.ndarray:
    """Homography mapping image-1 lines onto image-2 lines (unit Frobenius norm).

    Each pair contributes l2^T H p = 0 for both endpoints p of the image-1
    line, where l2 is the infinite line through the image-2 segment.
    """
    if len(pairs) < 4:
        raise EstimationError(f"need at least 4 line pairs, got {len(pairs)}")
    data = _NormalizedPairs([a for a, _ in pairs], [b for _, b in pairs])
    Hn, degenerate = _solve(data.design(np.arange(len(pairs))))
    if degenerate:
        raise EstimationError("degenerate line configuration (design matrix rank < 8)")
    try:
        return normalize_homography(data.denormalize(Hn))
    except ValueError as exc:
        raise EstimationError(str(exc)) from exc


# ---------------------------------------------------------------- residuals


def _residuals(H: np.ndarray, e1: np.ndarray, lines2: np.ndarray) -> np.ndarray:
    """Mean endpoint-to-line distance for each pair under each H.

    ``H`` is (..., 3, 3), ``e1`` (N, 2, 3) homogeneous pixel endpoints and
    ``lines2`` (N, 3) pixel lines with unit normals. Endpoints mapped to
    infinity give an infinite residual.
    """
    q = np.einsum("...ij,nkj->...nki", H, e1)
    w = q[..., 2]
    bad = np.abs(w) <= 1e-9
    w = np.where(bad, 1.0, w)
    xy = q[..., :2] / w[..., None]
    d = np.abs((xy * lines2[:, None, :2]).sum(-1) + lines2[:, None, 2])
    d = np.where(bad, np.inf, d)
    return d.mean(axis=-1)


def _pixel_lines(lines: Sequence[LineSegment2D]) -> np.ndarray:
    return np.array([l.homogeneous_line() for l in lines])


def line_residual(H: np.ndarray, line1: LineSegment2D, line2: LineSegment2D) -> float:
    """Mean distance of line1's projected endpoints to line2's infinite line."""
    r = _residuals(np.asarray(H, dtype=np.float64), _homogenize(_endpoints([line1])), _pixel_lines([line2]))[0]
    if not np.isfinite(r):
        raise EstimationError("line endpoint projects to infinity")
    return float(r)


# ---------------------------------------------------------------- RANSAC


def _draw_samples(rng: np.random.Generator, n: int, iterations: int, k: int) -> np.ndarray:
    return np.argsort(rng.random((iterations, n)), axis=1)[:, :k]


def ransac_homography(
    matches: Sequence[tuple[int, int]],
    lines1: Sequence[LineSegment2D],
    lines2: Sequence[LineSegment2D],
    config: RansacConfig | None = None,
) -> HomographyEstimate:
    """Robust line-based homography.

    ``matches`` holds index pairs into ``lines1`` / ``lines2``. All minimal
    samples are drawn up front from the seeded generator, solved as one
    batch, and scored by ``line_residual < threshold``; the best model is
    refit on its inliers.
    """
    config = config or RansacConfig()
    if len(matches) < config.sample_size:
        raise EstimationError(f"need at least {config.sample_size} matches, got {len(matches)}")
    l1 = [lines1[i] for i, _ in matches]
    l2 = [lines2[j] for _, j in matches]
    data = _NormalizedPairs(l1, l2)
    e1 = _homogenize(_endpoints(l1))
    pix2 = _pixel_lines(l2)

    rng = np.random.default_rng(config.seed)
    samples = _draw_samples(rng, len(matches), config.iterations, config.sample_size)
    Hn, degenerate = _solve(data.design(samples))
    Hs = data.denormalize(Hn)
    with np.errstate(invalid="ignore", over="ignore", divide="ignore"):
        res = _residuals(Hs, e1, pix2)
    inlier = (res < config.threshold) & ~degenerate[:, None]
    counts = inlier.sum(axis=1)
    score = np.where(inlier, res, 0.0).sum(axis=1)
    # Most inliers first, then smallest summed inlier residual, then earliest.
    best = int(np.lexsort((np.arange(len(counts)), score, -counts))[0])
    if counts[best] < config.sample_size:
        raise EstimationError("no model reached the minimum inlier count")

    idx = np.flatnonzero(inlier[best])
    H = normalize_homography(Hs[best])
    for _ in range(2):
        try:
            refit = dlt_from_lines([(l1[i], l2[i]) for i in idx])
        except EstimationError:
            break
        r = _residuals(refit, e1, pix2)
        new_idx = np.flatnonzero(r < config.threshold)
        if len(new_idx) < config.sample_size:
            break
        H, idx = refit, new_idx
    final = _residuals(H, e1, pix2)
    return HomographyEstimate(H, [int(i) for i in idx], float(final[idx].mean()))


# ---------------------------------------------------------------- metrics


def corner_error(H_est: np.ndarray, H_gt: np.ndarray, width: float, height: float) -> float:
    corners = np.array([[0, 0], [width, 0], [width, height], [0, height]], dtype=np.float64)
    a = project_points(H_est, corners)
    b = project_points(H_gt, corners)
    return float(np.linalg.norm(a - b, axis=1).mean())


def auc(errors: Sequence[float], thresholds: Sequence[float] = AUC_THRESHOLDS) -> AUCReport:
    """Area under the cumulative error curve up to each threshold, over t.

    The empirical CDF is a staircase, so the integral is summed exactly step
    by step from the sorted errors.
    """
    e = np.sort(np.asarray(errors, dtype=np.float64))
    if e.size == 0:
        raise ValueError("auc needs at least one error value")
    if np.any(np.isnan(e)) or np.any(e < 0):
        raise ValueError("errors must be non-negative (use inf for failures)")
    n = e.size
    values = {}
    for t in thresholds:
        below = e[e < t]
        edges = np.r_[below, t]
        heights = np.arange(1, below.size + 1) / n
        area = float((heights * np.diff(edges)).sum())
        values[float(t)] = area / t
    return AUCReport(tuple(float(t) for t in thresholds), values, [float(x) for x in e])
