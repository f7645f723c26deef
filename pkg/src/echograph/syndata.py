"""Synthetic echo generator with analytic ground truth.

A case is a cup-shaped ventricle contour (42 keypoints: basal node 0,
apex node 21, basal node 41) breathing periodically about its base
midpoint. Uniform scaling makes the method-of-disks volume scale
exactly cubically, so the deformation amplitude can be solved in closed
form from the target ejection fraction: the stored EF is self-consistent
with the stored keypoints by construction, not by fitting.

Rendering draws a dark blood pool inside the contour, brighter tissue
outside, a bright endocardial band along the contour, then multiplies
by blurred Rayleigh speckle and adds Gaussian noise. Pixels are
quantized to 8-bit levels before storage so the in-memory video and the
file round trip are bit-identical. Annotations never depend on the
noise draws.
"""

from __future__ import annotations

import csv
import io
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import (
    AnnotationParseError,
    ConfigError,
    DimensionError,
    GenerationError,
    VideoFormatError,
)
from .geometry import N_KEYPOINTS, KeypointSet, ef_from_keypoints
from .ioutil import atomic_write_bytes, atomic_write_text
from .metrics import polygon_mask

VIDEO_MAGIC = b"EGVD"
VIDEO_VERSION = 1
TRUTH_DISKS = 200  # disk count used to certify stored EF values
ANNOTATION_PHASES = ("ED", "ES", "other")
SPLIT_NAMES = ("train", "val", "test")

POOL_LEVEL = 0.10
TISSUE_LEVEL = 0.32
BAND_AMPLITUDE = 0.55
BAND_SIGMA_PX = 1.3
SPECKLE_BLUR_PX = 2.0
ADDITIVE_SIGMA = 0.05
BOUNDS_MARGIN = 0.02


@dataclass(frozen=True)
class ShapeParams:
    """Geometry, motion, and noise knobs for one synthetic case."""

    ef: float = 0.60
    cycle_len: int = 32
    n_cycles: int = 1
    base_width: float = 0.50
    axis_len: float = 0.55
    apex_sharpness: float = 1.0
    tilt: float = 0.0
    base_center: tuple[float, float] = (0.50, 0.28)
    noise_level: float = 0.3
    image_size: tuple[int, int] = (112, 112)

    def __post_init__(self):
        if not 0.2 <= self.ef <= 0.8:
            raise ConfigError(f"target ef must be in [0.2, 0.8], got {self.ef}")
        if not 16 <= self.cycle_len <= 64:
            raise ConfigError(f"cycle_len must be in [16, 64], got {self.cycle_len}")
        if self.n_cycles < 1:
            raise ConfigError(f"n_cycles must be >= 1, got {self.n_cycles}")
        if not 0.2 <= self.base_width <= 0.8 or not 0.2 <= self.axis_len <= 0.8:
            raise ConfigError("base_width and axis_len must be in [0.2, 0.8]")
        if not 0.5 <= self.apex_sharpness <= 2.0:
            raise ConfigError(f"apex_sharpness must be in [0.5, 2], got {self.apex_sharpness}")
        if abs(self.tilt) > 0.5:
            raise ConfigError(f"tilt must be in [-0.5, 0.5] rad, got {self.tilt}")
        if not 0.0 <= self.noise_level <= 1.0:
            raise ConfigError(f"noise_level must be in [0, 1], got {self.noise_level}")
        h, w = self.image_size
        if h < 16 or w < 16:
            raise ConfigError(f"image size too small: {h}x{w}")

    @property
    def frame_count(self) -> int:
        return self.cycle_len * self.n_cycles


@dataclass
class SyntheticCase:
    case_id: str
    video: np.ndarray  # (F, H, W) float32 in [0, 1], 8-bit quantized
    keypoints: np.ndarray  # (F, 42, 2) float64, normalized coordinates
    ed_indices: tuple[int, ...]  # one per cycle
    es_indices: tuple[int, ...]
    true_ef: float
    seed: int
    params: ShapeParams

    @property
    def frame_count(self) -> int:
        return self.video.shape[0]

    def keypoint_set(self, frame: int) -> KeypointSet:
        return KeypointSet(self.keypoints[frame])


def _contour_template(params: ShapeParams) -> np.ndarray:
    """42-point cup at end diastole; apex lands exactly on node 21."""
    n = N_KEYPOINTS
    apex = n // 2
    # piecewise parameter so the apex is a node despite even point count
    phi = np.empty(n)
    phi[: apex + 1] = np.linspace(0.0, np.pi / 2, apex + 1)
    phi[apex:] = np.linspace(np.pi / 2, np.pi, n - apex)
    along = np.array([np.cos(params.tilt), -np.sin(params.tilt)])  # base direction
    down = np.array([np.sin(params.tilt), np.cos(params.tilt)])  # toward apex
    bc = np.asarray(params.base_center)
    width = (params.base_width / 2) * np.cos(phi)
    depth = params.axis_len * np.sin(phi) ** params.apex_sharpness
    return bc + width[:, None] * along + depth[:, None] * down


def _motion_scale(params: ShapeParams) -> np.ndarray:
    """Per-frame contraction factor s(t); s=1 at ED, discrete minimum at ES.

    Volume scales as s^3 under uniform scaling, so hitting the target EF
    needs s_es = (1 - ef)^(1/3). The cosine trough may fall between
    frames for odd cycle lengths; the amplitude is calibrated against
    the ES frame itself so the stored EF is exact either way.
    """
    c = params.cycle_len
    t = np.arange(params.frame_count)
    amp = 1.0 - (1.0 - params.ef) ** (1.0 / 3.0)
    trough = (1.0 - np.cos(2 * np.pi * (c // 2) / c)) / 2
    return 1.0 - (amp / trough) * (1.0 - np.cos(2 * np.pi * t / c)) / 2


def _band_distance_px(points: np.ndarray, image_size: tuple[int, int]) -> np.ndarray:
    """Distance from each pixel center to the contour polyline, in pixels."""
    h, w = image_size
    px = points * np.array([w, h])
    cx = np.arange(w) + 0.5
    cy = np.arange(h) + 0.5
    gx, gy = np.meshgrid(cx, cy)
    best = np.full((h, w), np.inf)
    n = len(px)
    for k in range(n):
        a = px[k]
        b = px[(k + 1) % n]
        ab = b - a
        denom = float(ab @ ab)
        dx, dy = gx - a[0], gy - a[1]
        if denom == 0.0:
            d2 = dx * dx + dy * dy
        else:
            t = np.clip((dx * ab[0] + dy * ab[1]) / denom, 0.0, 1.0)
            d2 = (dx - t * ab[0]) ** 2 + (dy - t * ab[1]) ** 2
        np.minimum(best, d2, out=best)
    return np.sqrt(best)


def render_frame(points: np.ndarray, image_size: tuple[int, int],
                 rng: np.random.Generator, noise_level: float) -> np.ndarray:
    """One grayscale frame for a contour, quantized to 8-bit levels."""
    inside = polygon_mask(points, image_size)
    img = np.where(inside, POOL_LEVEL, TISSUE_LEVEL)
    dist = _band_distance_px(points, image_size)
    img = img + BAND_AMPLITUDE * np.exp(-((dist / BAND_SIGMA_PX) ** 2))
    if noise_level > 0:
        speckle = rng.rayleigh(scale=np.sqrt(2 / np.pi), size=image_size)
        speckle = gaussian_filter(speckle, SPECKLE_BLUR_PX, mode="reflect")
        img = img * (1.0 - noise_level + noise_level * speckle)
        img = img + noise_level * ADDITIVE_SIGMA * rng.normal(size=image_size)
    img = np.clip(img, 0.0, 1.0)
    return (np.round(img * 255.0) / 255.0).astype(np.float32)


def generate_case(seed: int, params: ShapeParams, case_id: str | None = None) -> SyntheticCase:
    """Build one fully annotated case; bit-identical for equal inputs."""
    template = _contour_template(params)
    lo, hi = BOUNDS_MARGIN, 1.0 - BOUNDS_MARGIN
    if template.min() < lo or template.max() > hi:
        raise GenerationError(
            f"contour leaves the image for base_width={params.base_width}, "
            f"axis_len={params.axis_len}, tilt={params.tilt}"
        )
    scale = _motion_scale(params)
    bc = np.asarray(params.base_center)
    keypoints = bc + scale[:, None, None] * (template - bc)

    rng = np.random.default_rng(seed)
    video = np.stack([
        render_frame(kp, params.image_size, rng, params.noise_level) for kp in keypoints
    ])

    c = params.cycle_len
    ed = tuple(k * c for k in range(params.n_cycles))
    es = tuple(k * c + c // 2 for k in range(params.n_cycles))
    true_ef = ef_from_keypoints(
        KeypointSet(keypoints[ed[0]]), KeypointSet(keypoints[es[0]]), TRUTH_DISKS
    )
    return SyntheticCase(
        case_id=case_id if case_id is not None else f"case{seed:06d}",
        video=video,
        keypoints=keypoints,
        ed_indices=ed,
        es_indices=es,
        true_ef=true_ef,
        seed=seed,
        params=params,
    )


def sample_params(rng: np.random.Generator, image_size=(112, 112), noise_level=0.3,
                  n_cycles=1, cycle_len: int | None = None, ef: float | None = None) -> ShapeParams:
    """Draw shape parameters from documented ranges that stay in frame."""
    if cycle_len is None:
        cycle_len = 2 * int(rng.integers(8, 21))
    if ef is None:
        ef = float(rng.uniform(0.25, 0.75))
    return ShapeParams(
        ef=ef,
        cycle_len=cycle_len,
        n_cycles=n_cycles,
        base_width=float(rng.uniform(0.42, 0.58)),
        axis_len=float(rng.uniform(0.48, 0.62)),
        apex_sharpness=float(rng.uniform(0.85, 1.35)),
        tilt=float(rng.uniform(-0.22, 0.22)),
        base_center=(0.5 + float(rng.uniform(-0.05, 0.05)),
                     0.27 + float(rng.uniform(-0.04, 0.04))),
        noise_level=noise_level,
        image_size=image_size,
    )


# ---------------------------------------------------------------------------
# annotations

ANNOTATION_HEADER = (
    ["case_id", "frame_idx", "phase", "ef"]
    + [f"{axis}{i}" for i in range(N_KEYPOINTS) for axis in ("x", "y")]
    + ["split"]
)


@dataclass(eq=False)
class AnnotationRecord:
    case_id: str
    frame_idx: int
    phase: str  # ED, ES, or other
    ef: float
    points: np.ndarray  # (42, 2) normalized
    split: str  # train, val, or test


def records_from_case(case: SyntheticCase, split: str = "train") -> list[AnnotationRecord]:
    """One record per frame; key frames carry their phase tag."""
    ed, es = set(case.ed_indices), set(case.es_indices)
    out = []
    for f in range(case.frame_count):
        phase = "ED" if f in ed else "ES" if f in es else "other"
        out.append(AnnotationRecord(
            case_id=case.case_id,
            frame_idx=f,
            phase=phase,
            ef=case.true_ef,
            points=case.keypoints[f],
            split=split,
        ))
    return out


def annotations_to_csv(records: list[AnnotationRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(ANNOTATION_HEADER)
    for r in records:
        row = [r.case_id, r.frame_idx, r.phase, f"{r.ef:.6f}"]
        row += [f"{v:.6f}" for v in np.asarray(r.points).reshape(-1)]
        row.append(r.split)
        writer.writerow(row)
    return buf.getvalue()


def write_annotations(records: list[AnnotationRecord], path) -> None:
    atomic_write_text(path, annotations_to_csv(records))


def read_annotations(path) -> list[AnnotationRecord]:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ANNOTATION_HEADER:
        raise AnnotationParseError(f"{path}: missing or wrong header row")
    n_cols = len(ANNOTATION_HEADER)
    records = []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != n_cols:
            raise AnnotationParseError(
                f"{path}: line {lineno}: expected {n_cols} columns, got {len(row)}"
            )
        case_id, frame_idx, phase, ef = row[0], row[1], row[2], row[3]
        if phase not in ANNOTATION_PHASES:
            raise AnnotationParseError(f"{path}: line {lineno}: unknown phase {phase!r}")
        split = row[-1]
        if split not in SPLIT_NAMES:
            raise AnnotationParseError(f"{path}: line {lineno}: unknown split {split!r}")
        try:
            records.append(AnnotationRecord(
                case_id=case_id,
                frame_idx=int(frame_idx),
                phase=phase,
                ef=float(ef),
                points=np.array(row[4:-1], dtype=np.float64).reshape(N_KEYPOINTS, 2),
                split=split,
            ))
        except ValueError as e:
            raise AnnotationParseError(f"{path}: line {lineno}: {e}") from None
    return records


# ---------------------------------------------------------------------------
# raw video container

def video_to_bytes(frames: np.ndarray) -> bytes:
    frames = np.asarray(frames)
    if frames.ndim != 3:
        raise DimensionError(f"video must be (F, H, W), got {frames.shape}")
    f, h, w = frames.shape
    header = VIDEO_MAGIC + struct.pack("<HHHI", VIDEO_VERSION, h, w, f)
    payload = np.round(np.clip(frames, 0.0, 1.0) * 255.0).astype(np.uint8)
    return header + payload.tobytes()


def write_video(path, frames: np.ndarray) -> None:
    atomic_write_bytes(path, video_to_bytes(frames))


def video_from_bytes(data: bytes) -> np.ndarray:
    head = struct.calcsize("<HHHI") + 4
    if len(data) < head or data[:4] != VIDEO_MAGIC:
        raise VideoFormatError("not a video container (bad magic)")
    version, h, w, f = struct.unpack("<HHHI", data[4:head])
    if version != VIDEO_VERSION:
        raise VideoFormatError(f"unsupported video version {version}")
    if h == 0 or w == 0:
        raise VideoFormatError(f"bad frame size {h}x{w}")
    expected = head + f * h * w
    if len(data) != expected:
        raise VideoFormatError(
            f"payload is {len(data) - head} bytes, header implies {expected - head}"
        )
    frames = np.frombuffer(data[head:], dtype=np.uint8).reshape(f, h, w)
    return frames.astype(np.float32) / 255.0


def read_video(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return video_from_bytes(fh.read())


# ---------------------------------------------------------------------------
# dataset assembly

def split_dataset(case_ids, ratios=(0.8, 0.1, 0.1), seed: int = 0) -> dict[str, str]:
    """Deterministic shuffled partition with largest-remainder sizing."""
    if len(ratios) != len(SPLIT_NAMES):
        raise ConfigError(f"need {len(SPLIT_NAMES)} ratios, got {len(ratios)}")
    if any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"ratios must be nonnegative and sum to 1, got {ratios}")
    ids = list(case_ids)
    n = len(ids)
    quotas = [n * r for r in ratios]
    sizes = [int(q) for q in quotas]
    leftovers = sorted(range(len(ratios)), key=lambda i: quotas[i] - sizes[i], reverse=True)
    for i in range(n - sum(sizes)):
        sizes[leftovers[i]] += 1
    order = np.random.default_rng(seed).permutation(n)
    assignment = {}
    pos = 0
    for name, size in zip(SPLIT_NAMES, sizes):
        for k in order[pos : pos + size]:
            assignment[ids[k]] = name
        pos += size
    return assignment


def generate_dataset(out_dir, count: int, seed: int, *, image_size=(112, 112),
                     noise_level=0.3, n_cycles=1, cycle_len: int | None = None,
                     ratios=(0.8, 0.1, 0.1)) -> dict:
    """Write videos/ and annotations.csv for `count` randomized cases.

    Streams case by case so memory stays flat; re-running with the same
    arguments reproduces the directory byte for byte.
    """
    out_dir = Path(out_dir)
    video_dir = out_dir / "videos"
    video_dir.mkdir(parents=True, exist_ok=True)
    ids = [f"case{i:06d}" for i in range(count)]
    assignment = split_dataset(ids, ratios, seed)
    records = []
    for i, case_id in enumerate(ids):
        case_seed = seed * 1_000_003 + i  # disjoint per-case streams
        params = sample_params(
            np.random.default_rng(case_seed),
            image_size=image_size,
            noise_level=noise_level,
            n_cycles=n_cycles,
            cycle_len=cycle_len,
        )
        case = generate_case(case_seed, params, case_id=case_id)
        write_video(video_dir / f"{case_id}.egvd", case.video)
        records.extend(records_from_case(case, assignment[case_id]))
    write_annotations(records, out_dir / "annotations.csv")
    counts = {name: sum(1 for v in assignment.values() if v == name) for name in SPLIT_NAMES}
    return {"cases": count, "frames": len(records), "splits": counts}
