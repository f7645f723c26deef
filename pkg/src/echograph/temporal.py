"""Whole-video EF estimation: volume curves, cycle detection, windowing.

Two pipelines sit on top of the frame and clip models. The two-stage
pipeline predicts per-frame contours, turns them into a volume curve,
finds ED/ES peak pairs, and runs the clip model on each detected cycle.
The sliding-window pipeline runs the classifier-mode clip model on
fixed windows and averages the regressed EFs.

Peak detection is deliberately conservative: a video that opens at its
fullest frame is accepted as starting on ED, but a trough only counts
as ES once the curve rebounds afterwards, because the refill is what
certifies end-systole. A trough at the very end never qualifies, and an
interior trough is dropped unless the rebound recovers a set fraction
of the drop from the paired ED. A monotone decline, noisy or not,
therefore yields no cycles, which callers report as a failure status
rather than an exception.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .datasets import resample_cycle_indices
from .errors import (
    ConfigError,
    DegenerateContourError,
    DimensionError,
    InputTooShortError,
)
from .geometry import KeypointSet, method_of_disks_volume
from .model import MultiFrameModel, SingleFrameModel, multi_frame_forward

DEFAULT_MIN_SEPARATION = 5
DEFAULT_SMOOTHING = 3
DEFAULT_REBOUND_FRACTION = 0.25


@dataclass(frozen=True)
class VolumeCurve:
    """Per-frame ventricle volumes."""

    volumes: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.volumes, dtype=np.float64)
        if v.ndim != 1:
            raise DimensionError(f"volume curve must be 1D, got shape {v.shape}")
        if not np.all(np.isfinite(v)) or np.any(v < 0):
            raise DimensionError("volumes must be finite and nonnegative")
        object.__setattr__(self, "volumes", v)

    def __len__(self) -> int:
        return len(self.volumes)


@dataclass(frozen=True)
class CyclePair:
    """ED and ES frame indices of one detected half-cycle."""

    ed_index: int
    es_index: int

    def __post_init__(self):
        if not 0 <= self.ed_index < self.es_index:
            raise ConfigError(
                f"cycle needs 0 <= ed < es, got ({self.ed_index}, {self.es_index})"
            )


@dataclass(frozen=True)
class LikelihoodDecode:
    """Argmax decode of the classifier's two likelihood arrays.

    status is "swapped_order" when the decoded ED does not precede the
    decoded ES; the indices are still reported as found.
    """

    ed_index: int
    es_index: int
    status: str


def volume_curve(keypoints_per_frame, n_disks: int = 20) -> VolumeCurve:
    """Method-of-disks volume for every frame's contour."""
    volumes = []
    for i, kp in enumerate(keypoints_per_frame):
        if not isinstance(kp, KeypointSet):
            kp = KeypointSet(kp)
        try:
            volumes.append(method_of_disks_volume(kp, n_disks).volume)
        except DegenerateContourError as e:
            raise DegenerateContourError(f"frame {i}: {e}") from None
    return VolumeCurve(np.array(volumes))


def moving_average(values: np.ndarray, window: int) -> np.ndarray:
    """Centered moving average; the window shrinks near the edges."""
    if window < 1 or window % 2 == 0:
        raise ConfigError(f"smoothing window must be odd and >= 1, got {window}")
    values = np.asarray(values, dtype=np.float64)
    if window == 1:
        return values.copy()
    half = window // 2
    n = len(values)
    return np.array([values[max(0, i - half) : i + half + 1].mean() for i in range(n)])


def _runs(values: np.ndarray) -> list[tuple[int, float]]:
    starts = [0]
    for i in range(1, len(values)):
        if values[i] != values[i - 1]:
            starts.append(i)
    return [(s, float(values[s])) for s in starts]


def detect_peaks(curve, min_separation: int = DEFAULT_MIN_SEPARATION,
                 smoothing: int = DEFAULT_SMOOTHING,
                 rebound_fraction: float = DEFAULT_REBOUND_FRACTION) -> list[CyclePair]:
    """ED/ES pairs from a volume curve; empty list when no cycle exists.

    Maxima (ED) and minima (ES) are strict against neighboring runs, so
    a plateau counts once, at its leftmost frame. A maximum may sit on
    the curve boundary; a minimum may not (see module docstring). Each
    maximum pairs with the first following minimum. Pairs spanning
    fewer than min_separation frames are dropped, as are pairs where
    the curve never climbs back by at least rebound_fraction of the
    ED-to-ES drop: without that refill a dip on a declining curve is
    indistinguishable from noise.
    """
    if rebound_fraction < 0:
        raise ConfigError(
            f"rebound_fraction must be >= 0, got {rebound_fraction}"
        )
    volumes = curve.volumes if isinstance(curve, VolumeCurve) else np.asarray(curve)
    if len(volumes) < 3:
        return []
    smoothed = moving_average(volumes, smoothing)
    runs = _runs(smoothed)
    events = []  # (start index, is_max)
    for k, (start, val) in enumerate(runs):
        left = runs[k - 1][1] if k > 0 else None
        right = runs[k + 1][1] if k + 1 < len(runs) else None
        if left is None and right is None:
            continue  # constant curve
        if (left is None or val > left) and (right is None or val > right):
            events.append((start, True))
        elif left is not None and right is not None and val < left and val < right:
            events.append((start, False))
    pairs = []
    for i, (ed, is_max) in enumerate(events):
        if not is_max:
            continue
        following = [s for s, m in events[i + 1 :] if not m]
        if not following or following[0] - ed < min_separation:
            continue
        es = following[0]
        # min events never sit on the boundary, so the tail is nonempty
        rebound = smoothed[es + 1 :].max() - smoothed[es]
        if rebound < rebound_fraction * (smoothed[ed] - smoothed[es]):
            continue
        pairs.append(CyclePair(ed, es))
    return pairs


def decode_edes_likelihoods(ed_array, es_array) -> LikelihoodDecode:
    """Argmax of each likelihood array; leftmost index wins ties."""
    ed_array = np.asarray(ed_array)
    es_array = np.asarray(es_array)
    if ed_array.shape != es_array.shape or ed_array.ndim != 1 or len(ed_array) < 2:
        raise DimensionError(
            f"need two equal-length arrays of >= 2 frames, got {ed_array.shape} and {es_array.shape}"
        )
    ed = int(np.argmax(ed_array))
    es = int(np.argmax(es_array))
    return LikelihoodDecode(ed, es, "ok" if ed < es else "swapped_order")


@dataclass
class WindowResult:
    start: int
    ef_regressed: float
    ef_from_keypoints: float
    ed_index: int  # video frame indices
    es_index: int
    status: str


@dataclass
class SlidingWindowReport:
    mean_ef: float
    windows: list[WindowResult] = field(default_factory=list)


def sliding_window_ef(model: MultiFrameModel, video: np.ndarray,
                      stride: int | None = None) -> SlidingWindowReport:
    """Average the classifier model's regressed EF over strided windows."""
    if model.config.mode != "multi_frame_classifier":
        raise ConfigError(f"sliding windows need a classifier-mode model, got {model.config.mode}")
    window = model.config.clip_len
    video = np.asarray(video)
    if len(video) < window:
        raise InputTooShortError(
            f"video has {len(video)} frames, window needs {window}"
        )
    if stride is None:
        stride = max(1, window // 2)
    if stride < 1:
        raise ConfigError(f"stride must be >= 1, got {stride}")
    results = []
    for start in range(0, len(video) - window + 1, stride):
        pred = multi_frame_forward(model, video[start : start + window])
        decode = decode_edes_likelihoods(pred.ed_likelihood, pred.es_likelihood)
        results.append(WindowResult(
            start=start,
            ef_regressed=pred.ef_regressed,
            ef_from_keypoints=pred.ef_from_keypoints,
            ed_index=start + decode.ed_index,
            es_index=start + decode.es_index,
            status=decode.status,
        ))
    mean_ef = float(np.mean([r.ef_regressed for r in results]))
    return SlidingWindowReport(mean_ef=mean_ef, windows=results)


@dataclass
class CycleResult:
    pair: CyclePair
    ef_regressed: float
    ef_from_keypoints: float


@dataclass
class TwoStageReport:
    status: str  # "ok" or "no_cycle_found"
    mean_ef: float  # NaN when no cycle was found
    cycles: list[CycleResult] = field(default_factory=list)
    volumes: np.ndarray | None = None


def two_stage_ef(frame_model: SingleFrameModel, clip_model: MultiFrameModel,
                 video: np.ndarray, n_disks: int | None = None,
                 min_separation: int = DEFAULT_MIN_SEPARATION,
                 smoothing: int = DEFAULT_SMOOTHING,
                 rebound_fraction: float = DEFAULT_REBOUND_FRACTION,
                 batch_size: int = 64) -> TwoStageReport:
    """Volume-curve cycle detection, then one clip-model pass per cycle."""
    if not isinstance(frame_model, SingleFrameModel):
        raise ConfigError("two-stage needs a single-frame model for the volume curve")
    if not isinstance(clip_model, MultiFrameModel):
        raise ConfigError("two-stage needs a multi-frame model for per-cycle EF")
    video = np.asarray(video)
    if len(video) == 0:
        raise InputTooShortError("video has no frames")
    if n_disks is None:
        n_disks = frame_model.config.n_disks
    kps = np.concatenate([
        frame_model.forward(video[lo : lo + batch_size])
        for lo in range(0, len(video), batch_size)
    ])
    curve = volume_curve(kps.astype(np.float64), n_disks)
    pairs = detect_peaks(curve, min_separation, smoothing, rebound_fraction)
    if not pairs:
        return TwoStageReport(status="no_cycle_found", mean_ef=float("nan"),
                              volumes=curve.volumes)
    cycles = []
    for pair in pairs:
        idx = resample_cycle_indices(pair.ed_index, pair.es_index, clip_model.config.clip_len)
        pred = multi_frame_forward(clip_model, video[idx])
        cycles.append(CycleResult(
            pair=pair,
            ef_regressed=pred.ef_regressed,
            ef_from_keypoints=pred.ef_from_keypoints,
        ))
    mean_ef = float(np.mean([c.ef_regressed for c in cycles]))
    return TwoStageReport(status="ok", mean_ef=mean_ef, cycles=cycles, volumes=curve.volumes)
