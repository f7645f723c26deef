"""Contour and EF evaluation metrics.

Dice is computed on rasterized masks (pixel-center even-odd test) so
contour methods are scored the same way mask-based baselines are.
Hausdorff distances are in pixels on densified contours; keypoint error
is in percent of the image dimension.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError
from .geometry import KeypointSet

DEFAULT_GRID = (112, 112)
DENSIFY_STEP_PX = 0.5


@dataclass(frozen=True)
class SegmentationScores:
    """Per-case contour agreement: Dice fraction, Hausdorff px, MKE %."""

    dice: float
    hausdorff: float
    mke: float

    def __post_init__(self):
        if not (0.0 <= self.dice <= 1.0):
            raise DimensionError(f"dice {self.dice} outside [0, 1]")
        if self.hausdorff < 0 or self.mke < 0:
            raise DimensionError("hausdorff and mke must be nonnegative")


@dataclass(frozen=True)
class EfMetrics:
    """EF agreement over a sample; r2 is None when the targets have no variance."""

    mae: float
    rmse: float
    r2: float | None
    n: int


def _points(kp) -> np.ndarray:
    pts = kp.points if isinstance(kp, KeypointSet) else np.asarray(kp, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise DimensionError(f"expected (N, 2) points, got {pts.shape}")
    return pts


def polygon_mask(kp, grid: tuple[int, int] = DEFAULT_GRID) -> np.ndarray:
    """Even-odd rasterization of a closed contour onto pixel centers.

    Pixel (i, j) has normalized center ((j + 0.5)/W, (i + 0.5)/H); the
    half-open crossing rule keeps vertices on a scanline from counting
    twice.
    """
    h, w = grid
    pts = _points(kp)
    xc = (np.arange(w) + 0.5) / w
    yc = (np.arange(h) + 0.5) / h
    inside = np.zeros((h, w), dtype=bool)
    x0, y0 = pts[:, 0], pts[:, 1]
    x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
    for e in range(len(pts)):
        if y0[e] == y1[e]:
            continue
        rows = (y0[e] <= yc) != (y1[e] <= yc)
        if not rows.any():
            continue
        xcross = x0[e] + (yc - y0[e]) * (x1[e] - x0[e]) / (y1[e] - y0[e])
        inside ^= rows[:, None] & (xc[None, :] < xcross[:, None])
    return inside


def dice(kp_a, kp_b, grid: tuple[int, int] = DEFAULT_GRID) -> float:
    """Dice overlap of the rasterized contours; two empty masks count as 1.0."""
    mask_a = polygon_mask(kp_a, grid)
    mask_b = polygon_mask(kp_b, grid)
    total = int(mask_a.sum()) + int(mask_b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((mask_a & mask_b).sum()) / total


def densify_contour(points_px: np.ndarray, max_step: float = DENSIFY_STEP_PX) -> np.ndarray:
    """Subdivide closed-contour edges so no segment exceeds ``max_step``."""
    pts = np.asarray(points_px, dtype=np.float64)
    out = []
    n = len(pts)
    for i in range(n):
        a, b = pts[i], pts[(i + 1) % n]
        steps = max(1, int(np.ceil(np.linalg.norm(b - a) / max_step)))
        frac = np.arange(steps) / steps
        out.append(a[None, :] + frac[:, None] * (b - a)[None, :])
    return np.concatenate(out, axis=0)


def _directed_sq(a: np.ndarray, b: np.ndarray, chunk: int = 512) -> float:
    """max over a of min over b of squared distance."""
    worst = 0.0
    for lo in range(0, len(a), chunk):
        d = a[lo : lo + chunk, None, :] - b[None, :, :]
        sq = (d**2).sum(axis=2)
        worst = max(worst, float(sq.min(axis=1).max()))
    return worst


def hausdorff(kp_a, kp_b, grid: tuple[int, int] = DEFAULT_GRID) -> float:
    """Symmetric Hausdorff distance in pixels between densified contours."""
    h, w = grid
    scale = np.array([w, h], dtype=np.float64)
    a = densify_contour(_points(kp_a) * scale)
    b = densify_contour(_points(kp_b) * scale)
    return float(np.sqrt(max(_directed_sq(a, b), _directed_sq(b, a))))


def mean_keypoint_error(pred, gt) -> float:
    """Mean absolute coordinate error in percent of the image dimension."""
    p, g = _points(pred), _points(gt)
    if p.shape != g.shape:
        raise DimensionError(f"keypoint shape mismatch: {p.shape} vs {g.shape}")
    return float(np.abs(p - g).mean() * 100.0)


def score_case(pred, gt, grid: tuple[int, int] = DEFAULT_GRID) -> SegmentationScores:
    return SegmentationScores(
        dice=dice(pred, gt, grid),
        hausdorff=hausdorff(pred, gt, grid),
        mke=mean_keypoint_error(pred, gt),
    )


def ef_metrics(pred, gt) -> EfMetrics:
    """MAE, RMSE and R^2 of EF estimates against targets."""
    p = np.asarray(pred, dtype=np.float64).ravel()
    g = np.asarray(gt, dtype=np.float64).ravel()
    if p.shape != g.shape:
        raise DimensionError(f"length mismatch: {p.shape[0]} predictions vs {g.shape[0]} targets")
    if p.size == 0:
        raise DimensionError("ef_metrics needs at least one sample")
    err = p - g
    mae = float(np.abs(err).mean())
    rmse = float(np.sqrt((err**2).mean()))
    ss_res = float((err**2).sum())
    ss_tot = float(((g - g.mean()) ** 2).sum())
    r2 = None if ss_tot == 0.0 else 1.0 - ss_res / ss_tot
    return EfMetrics(mae=mae, rmse=rmse, r2=r2, n=int(p.size))


def summary_stats(values) -> dict:
    """Mean/std plus the box-plot percentiles of a metric sample."""
    arr = np.asarray(values, dtype=np.float64).ravel()
    if arr.size == 0:
        raise DimensionError("summary of an empty sample")
    pct = np.percentile(arr, [5, 25, 50, 75, 95])
    return {
        "n": int(arr.size),
        "mean": float(arr.mean()),
        "std": float(arr.std()),
        "p5": float(pct[0]),
        "p25": float(pct[1]),
        "p50": float(pct[2]),
        "p75": float(pct[3]),
        "p95": float(pct[4]),
    }


def format_case_csv(rows: list[dict], fields: list[str]) -> str:
    """Per-case report CSV; floats fixed to 6 decimals for stable diffs."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(fields)
    for row in rows:
        rec = []
        for f in fields:
            v = row[f]
            rec.append(f"{v:.6f}" if isinstance(v, float) else v)
        writer.writerow(rec)
    return buf.getvalue()
