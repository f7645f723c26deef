"""Loaders that turn a generated dataset directory into training arrays.

A dataset directory holds `annotations.csv` plus one raw video per case
under `videos/`. Loaders group annotation rows by case, then cut the
videos into whichever sample shape a model trains on: single frames
with per-frame contours, or fixed-length clips with EF labels. All
ordering is sorted and all subsampling is seeded, so a loader call is
reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import AnnotationParseError, ConfigError
from .syndata import read_annotations, read_video


@dataclass
class CaseAnnotations:
    case_id: str
    split: str
    ef: float
    points: np.ndarray  # (frame_count, 42, 2)
    ed_indices: tuple[int, ...]
    es_indices: tuple[int, ...]

    @property
    def frame_count(self) -> int:
        return self.points.shape[0]


@dataclass
class FrameSamples:
    """Per-frame supervision for single-frame models."""

    images: np.ndarray  # (N, H, W) float32
    keypoints: np.ndarray  # (N, 42, 2) float64

    def __len__(self) -> int:
        return len(self.images)


@dataclass
class ClipSamples:
    """Clip supervision for multi-frame models.

    ed_indices and es_indices are positions inside each clip; they are
    present only when clips were cut as sliding windows around labeled
    key frames (classifier training).
    """

    clips: np.ndarray  # (N, F, H, W) float32
    keypoints: np.ndarray  # (N, 2, 42, 2): ED contour then ES contour
    efs: np.ndarray  # (N,)
    ed_indices: np.ndarray | None = None
    es_indices: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.clips)


def load_annotated_cases(data_dir) -> dict[str, CaseAnnotations]:
    """Group annotation rows into per-case arrays, keyed by case id."""
    data_dir = Path(data_dir)
    by_case: dict[str, list] = {}
    for rec in read_annotations(data_dir / "annotations.csv"):
        by_case.setdefault(rec.case_id, []).append(rec)
    cases = {}
    for case_id, recs in by_case.items():
        recs.sort(key=lambda r: r.frame_idx)
        if [r.frame_idx for r in recs] != list(range(len(recs))):
            raise AnnotationParseError(f"case {case_id}: frame indices are not 0..{len(recs) - 1}")
        cases[case_id] = CaseAnnotations(
            case_id=case_id,
            split=recs[0].split,
            ef=recs[0].ef,
            points=np.stack([r.points for r in recs]),
            ed_indices=tuple(r.frame_idx for r in recs if r.phase == "ED"),
            es_indices=tuple(r.frame_idx for r in recs if r.phase == "ES"),
        )
    return cases


def case_video(data_dir, case_id: str) -> np.ndarray:
    return read_video(Path(data_dir) / "videos" / f"{case_id}.egvd")


def _split_cases(data_dir, split: str) -> list[CaseAnnotations]:
    cases = [c for c in load_annotated_cases(data_dir).values() if c.split == split]
    cases.sort(key=lambda c: c.case_id)
    return cases


def load_frame_dataset(data_dir, split: str = "train", limit: int | None = None) -> FrameSamples:
    """Every annotated frame of the split as an independent sample."""
    images, keypoints = [], []
    for case in _split_cases(data_dir, split):
        video = case_video(data_dir, case.case_id)
        for f in range(case.frame_count):
            images.append(video[f])
            keypoints.append(case.points[f])
            if limit is not None and len(images) == limit:
                return FrameSamples(np.stack(images), np.stack(keypoints))
    if not images:
        raise ConfigError(f"split {split!r} has no frames in {data_dir}")
    return FrameSamples(np.stack(images), np.stack(keypoints))


def resample_cycle_indices(ed: int, es: int, clip_len: int) -> np.ndarray:
    """Uniformly spread clip_len frame indices over [ed..es], nearest frame.

    The first index is always ed and the last always es, matching the
    convention that a known-key-frame clip starts at ED and ends at ES.
    """
    if es <= ed:
        raise ConfigError(f"cycle must run forward, got ed={ed}, es={es}")
    if clip_len < 2:
        raise ConfigError(f"clip_len must be >= 2, got {clip_len}")
    return np.rint(np.linspace(ed, es, clip_len)).astype(int)


def load_clip_dataset(data_dir, split: str, clip_len: int, labeled_frames: bool = False,
                      windows_per_cycle: int = 2, seed: int = 0) -> ClipSamples:
    """Cut one sample per heart cycle from each case of the split.

    labeled_frames=False resamples each ED..ES span to exactly clip_len
    frames (known-key-frame training). labeled_frames=True instead cuts
    windows_per_cycle windows of clip_len consecutive frames around
    each cycle, recording where ED and ES landed inside the window
    (classifier training). Cycles that cannot fit in a window are
    skipped.
    """
    rng = np.random.default_rng(seed)
    clips, keypoints, efs, eds, ess = [], [], [], [], []
    for case in _split_cases(data_dir, split):
        video = case_video(data_dir, case.case_id)
        for ed, es in zip(case.ed_indices, case.es_indices):
            if not labeled_frames:
                idx = resample_cycle_indices(ed, es, clip_len)
                clips.append(video[idx])
                keypoints.append(np.stack([case.points[ed], case.points[es]]))
                efs.append(case.ef)
                continue
            first = max(0, es - clip_len + 1)
            last = min(ed, case.frame_count - clip_len)
            if last < first:
                continue  # the ED..ES span does not fit in one window
            starts = np.arange(first, last + 1)
            if len(starts) > windows_per_cycle:
                starts = np.sort(rng.choice(starts, size=windows_per_cycle, replace=False))
            for start in starts:
                clips.append(video[start : start + clip_len])
                keypoints.append(np.stack([case.points[ed], case.points[es]]))
                efs.append(case.ef)
                eds.append(ed - start)
                ess.append(es - start)
    if not clips:
        raise ConfigError(
            f"split {split!r} yields no clips of length {clip_len} in {data_dir}"
        )
    samples = ClipSamples(
        clips=np.stack(clips),
        keypoints=np.stack(keypoints),
        efs=np.array(efs),
    )
    if labeled_frames:
        samples.ed_indices = np.array(eds)
        samples.es_indices = np.array(ess)
    return samples
