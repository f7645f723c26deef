"""Contour geometry: areas, long axis, method-of-disks volumes, and EF.

Volumes use the monoplane method of disks: slice the contour
perpendicular to the long axis, treat each chord as a disk diameter,
and stack the disks. A single apical view gives no out-of-plane
information, so the circular-disk assumption is the standard one.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateContourError, DegenerateVolumeError, NegativeEfWarning

APEX_INDEX = 21
BASAL_INDICES = (0, 41)
N_KEYPOINTS = 42


@dataclass(frozen=True)
class KeypointSet:
    """Ordered 2D contour points with designated apex and basal nodes.

    Points run clockwise basal-left, through the apex, to basal-right,
    in normalized image coordinates.
    """

    points: np.ndarray
    apex_index: int = APEX_INDEX
    basal_indices: tuple[int, int] = BASAL_INDICES

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 3:
            raise DegenerateContourError(f"keypoints must be (N>=3, 2), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise DegenerateContourError("keypoints contain non-finite coordinates")
        n = pts.shape[0]
        idx = (self.apex_index, *self.basal_indices)
        if len(set(idx)) != 3 or any(not (0 <= i < n) for i in idx):
            raise DegenerateContourError(
                f"apex/basal indices {idx} must be distinct and within 0..{n - 1}"
            )
        object.__setattr__(self, "points", pts)

    @property
    def n_points(self) -> int:
        return self.points.shape[0]

    @property
    def apex(self) -> np.ndarray:
        return self.points[self.apex_index]

    @property
    def basal_points(self) -> np.ndarray:
        return self.points[list(self.basal_indices)]


@dataclass(frozen=True)
class LongAxis:
    apex: np.ndarray
    base_midpoint: np.ndarray
    length: float


@dataclass(frozen=True)
class VolumeEstimate:
    """Stacked-disk volume in normalized cubic units."""

    volume: float
    n_disks: int
    long_axis_length: float

    def __post_init__(self):
        if self.volume < 0:
            raise DegenerateVolumeError(f"negative volume {self.volume}")
        if self.n_disks < 1:
            raise DegenerateVolumeError(f"n_disks must be >= 1, got {self.n_disks}")


def _segments_cross(p: np.ndarray, q: np.ndarray, r: np.ndarray, s: np.ndarray) -> bool:
    """Proper or touching intersection of segments pq and rs."""

    def orient(a, b, c):
        v = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        return 0 if v == 0 else (1 if v > 0 else -1)

    def on_segment(a, b, c):
        return (
            min(a[0], b[0]) <= c[0] <= max(a[0], b[0])
            and min(a[1], b[1]) <= c[1] <= max(a[1], b[1])
        )

    o1, o2 = orient(p, q, r), orient(p, q, s)
    o3, o4 = orient(r, s, p), orient(r, s, q)
    if o1 != o2 and o3 != o4:
        return True
    if o1 == 0 and on_segment(p, q, r):
        return True
    if o2 == 0 and on_segment(p, q, s):
        return True
    if o3 == 0 and on_segment(r, s, p):
        return True
    if o4 == 0 and on_segment(r, s, q):
        return True
    return False


def _check_simple(pts: np.ndarray) -> None:
    """Reject self-intersecting contours. O(n^2) over edges; n is small."""
    # repeated consecutive vertices carry no edge; drop them first so the
    # remaining edges are all positive-length and adjacency is by index
    keep = [0]
    for i in range(1, len(pts)):
        if not np.array_equal(pts[i], pts[keep[-1]]):
            keep.append(i)
    if len(keep) > 1 and np.array_equal(pts[keep[-1]], pts[keep[0]]):
        keep.pop()
    p = pts[keep]
    n = len(p)
    if n < 3:
        raise DegenerateContourError("contour collapses to fewer than 3 distinct points")
    for i in range(n):
        for j in range(i + 1, n):
            if j == i + 1 or (i == 0 and j == n - 1):
                continue
            if _segments_cross(p[i], p[(i + 1) % n], p[j], p[(j + 1) % n]):
                raise DegenerateContourError(f"contour self-intersects (edges {i} and {j})")


def polygon_area(kp: KeypointSet) -> float:
    """Absolute shoelace area of the closed contour."""
    pts = kp.points
    _check_simple(pts)
    x, y = pts[:, 0], pts[:, 1]
    return float(abs(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y)) / 2.0)


def long_axis(kp: KeypointSet) -> LongAxis:
    """Axis from the apex to the midpoint of the two basal points."""
    apex = kp.apex.copy()
    mid = kp.basal_points.mean(axis=0)
    length = float(np.linalg.norm(apex - mid))
    if length <= 0.0:
        raise DegenerateContourError("apex coincides with the base midpoint")
    return LongAxis(apex=apex, base_midpoint=mid, length=length)


def method_of_disks_volume(kp: KeypointSet, n_disks: int = 20) -> VolumeEstimate:
    """Sum of disk volumes over chords perpendicular to the long axis.

    Disks sit at the mid-height of each of ``n_disks`` equal slabs.
    Chord width is the distance between the outermost crossings of the
    contour at that level, which tolerates small annotation folds.
    """
    if n_disks < 1:
        raise DegenerateVolumeError(f"n_disks must be >= 1, got {n_disks}")
    axis = long_axis(kp)

    u = (axis.apex - axis.base_midpoint) / axis.length
    v = np.array([-u[1], u[0]])
    rel = kp.points - axis.base_midpoint
    t = rel @ u
    w = rel @ v

    t0, w0 = t, w
    t1, w1 = np.roll(t, -1), np.roll(w, -1)
    h = axis.length / n_disks
    levels = (np.arange(n_disks) + 0.5) * h

    # half-open crossing test so a vertex exactly on a level counts once
    below0 = t0[None, :] <= levels[:, None]
    below1 = t1[None, :] <= levels[:, None]
    mask = below0 != below1
    if not mask.any(axis=1).all():
        k = int(np.flatnonzero(~mask.any(axis=1))[0])
        raise DegenerateContourError(f"no contour crossings at disk level {k}")
    with np.errstate(divide="ignore", invalid="ignore"):
        frac = (levels[:, None] - t0[None, :]) / (t1 - t0)[None, :]
        cross = w0[None, :] + frac * (w1 - w0)[None, :]
    lo = np.where(mask, cross, np.inf).min(axis=1)
    hi = np.where(mask, cross, -np.inf).max(axis=1)
    diameters = hi - lo
    volume = float(np.pi * np.sum((diameters / 2.0) ** 2) * h)
    return VolumeEstimate(volume=volume, n_disks=n_disks, long_axis_length=axis.length)


def ef_from_volumes(edv: float, esv: float) -> float:
    """Ejection fraction (EDV - ESV) / EDV.

    A negative result (ESV above EDV) is returned as-is with a warning,
    so callers can decide whether to clamp or discard.
    """
    if edv <= 0:
        raise DegenerateVolumeError(f"end-diastolic volume must be positive, got {edv}")
    ef = (edv - esv) / edv
    if ef < 0:
        warnings.warn(f"negative ejection fraction {ef:.4f}", NegativeEfWarning, stacklevel=2)
    return float(ef)


def ef_from_keypoints(kp_ed: KeypointSet, kp_es: KeypointSet, n_disks: int = 20) -> float:
    edv = method_of_disks_volume(kp_ed, n_disks).volume
    esv = method_of_disks_volume(kp_es, n_disks).volume
    return ef_from_volumes(edv, esv)
