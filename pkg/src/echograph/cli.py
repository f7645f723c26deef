"""Command-line driver for the full pipeline.

Subcommands: gen-data, train, infer-frame, infer-video, eval, bench.
Reports go to stdout as JSON (and, when --out is given, into the output
directory); tabular per-case data is written as CSV for plotting tools.
Config precedence is CLI flags > --config JSON file > built-in defaults,
and the effective config is echoed into every report. Every command is
deterministic for a fixed (config, seed) except the wall-clock fields
of bench. Exit code is 0 iff the command completed without errors;
warnings (like a swapped ED/ES decode) live in status fields.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time
from dataclasses import asdict, dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from .datasets import (
    case_video,
    load_annotated_cases,
    load_clip_dataset,
    load_frame_dataset,
    resample_cycle_indices,
)
from .errors import ConfigError, EchoGraphError
from .geometry import KeypointSet, ef_from_keypoints
from .ioutil import atomic_write_text
from .layers import parameter_count
from .metrics import ef_metrics, format_case_csv, score_case, summary_stats
from .model import (
    MODES,
    ModelConfig,
    MultiFrameModel,
    SingleFrameModel,
    build_model,
    expected_parameter_count,
    load_checkpoint,
    multi_frame_forward,
)
from .syndata import SPLIT_NAMES, generate_dataset, read_video
from .temporal import sliding_window_ef, two_stage_ef
from .training import TrainSchedule, train

THREADS_ENV = "ECHOGRAPH_THREADS"
BENCH_WARMUP = 3

# Values left None here are resolved downstream (model or library
# defaults) so that reports can tell "user asked for X" from "default".
_DEFAULTS = {
    "data": None,
    "ckpt": None,
    "frame_ckpt": None,
    "mode": None,
    "out": None,
    "seed": 0,
    "epochs": 100,
    "lr": 1e-3,
    "lr_decay": 1.0,
    "batch": 16,
    "lambda_ef": 1.0,
    "lambda_cls": 0.1,
    "spiral_len": 5,
    "n_disks": None,
    "window": None,
    "stride": None,
    "count": 10,
    "image_size": 112,
    "noise_level": 0.3,
    "n_cycles": 1,
    "cycle_len": None,
    "ratios": (0.8, 0.1, 0.1),
    "split": "test",
    "limit": None,
    "reps": 50,
    "descent_guard": False,
    "feature_width": None,
    "decoder_width": None,
    "gamma_hidden": None,
    "encoder_channels": None,
    "ef_hidden": None,
    "classifier_hidden": None,
}

_VIDEO_MODES = ("two-stage", "classifier")


@dataclass(frozen=True)
class RunConfig:
    """Fully merged and validated settings for one command invocation."""

    command: str
    threads: int | None = None
    data: str | None = None
    ckpt: str | None = None
    frame_ckpt: str | None = None
    mode: str | None = None
    out: str | None = None
    seed: int = 0
    epochs: int = 100
    lr: float = 1e-3
    lr_decay: float = 1.0
    batch: int = 16
    lambda_ef: float = 1.0
    lambda_cls: float = 0.1
    spiral_len: int = 5
    n_disks: int | None = None
    window: int | None = None
    stride: int | None = None
    count: int = 10
    image_size: tuple[int, int] = (112, 112)
    noise_level: float = 0.3
    n_cycles: int = 1
    cycle_len: int | None = None
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    split: str = "test"
    limit: int | None = None
    reps: int = 50
    descent_guard: bool = False
    feature_width: int | None = None
    decoder_width: int | None = None
    gamma_hidden: int | None = None
    encoder_channels: tuple[int, ...] | None = None
    ef_hidden: tuple[int, ...] | None = None
    classifier_hidden: tuple[int, ...] | None = None


# ---------------------------------------------------------------------------
# parsing and merging


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="echograph",
        description="Synthetic echo data, contour models, and EF pipelines.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def new(name, help_text):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", help="JSON file supplying defaults for any flag")
        sp.add_argument("--seed", type=int, help="base RNG seed")
        sp.add_argument("--out", help="output directory")
        return sp

    gen = new("gen-data", "write a synthetic dataset (videos + annotations)")
    gen.add_argument("--count", type=int, help="number of cases")
    gen.add_argument("--image-size", type=int, help="square frame size in pixels")
    gen.add_argument("--noise-level", type=float, help="speckle/noise strength in [0, 1]")
    gen.add_argument("--n-cycles", type=int, help="cardiac cycles per video")
    gen.add_argument("--cycle-len", type=int, help="frames per cycle (default: sampled)")
    gen.add_argument("--ratios", help="train,val,test weights, e.g. 0.8,0.1,0.1 or 5,0,1")

    tr = new("train", "fit a model and write checkpoint + loss CSV")
    tr.add_argument("--data", help="dataset directory")
    tr.add_argument("--ckpt", help="checkpoint to resume from")
    tr.add_argument("--mode", choices=MODES, help="model variant")
    tr.add_argument("--epochs", type=int)
    tr.add_argument("--lr", type=float)
    tr.add_argument("--lr-decay", type=float, help="per-epoch lr multiplier in (0, 1]")
    tr.add_argument("--batch", type=int)
    tr.add_argument("--lambda-ef", type=float, help="EF loss weight")
    tr.add_argument("--lambda-cls", type=float, help="ED/ES classifier loss weight")
    tr.add_argument("--spiral-len", type=int, help="spatial spiral length")
    tr.add_argument("--n-disks", type=int, help="disks for volume computation")
    tr.add_argument("--window", type=int, help="clip length for multi-frame modes")
    tr.add_argument("--limit", type=int, help="cap single-frame training samples")
    tr.add_argument("--descent-guard", action="store_true", default=None,
                    help="roll back epochs whose mean loss rises (monotone curve)")

    inf = new("infer-frame", "predict contours for every frame of a video")
    inf.add_argument("--data", help="input .egvd video")
    inf.add_argument("--ckpt", help="single-frame checkpoint")

    vid = new("infer-video", "estimate EF for a whole video")
    vid.add_argument("--data", help="input .egvd video")
    vid.add_argument("--ckpt", help="multi-frame checkpoint")
    vid.add_argument("--frame-ckpt", help="single-frame checkpoint (two-stage mode)")
    vid.add_argument("--mode", choices=_VIDEO_MODES, help="pipeline variant")
    vid.add_argument("--stride", type=int, help="window stride (classifier mode)")
    vid.add_argument("--n-disks", type=int, help="disks for the volume curve")

    ev = new("eval", "score a checkpoint against an annotated dataset")
    ev.add_argument("--data", help="dataset directory")
    ev.add_argument("--ckpt", help="checkpoint to score")
    ev.add_argument("--split", choices=SPLIT_NAMES, help="dataset split")

    be = new("bench", "time forward passes and count parameters")
    be.add_argument("--ckpt", help="checkpoint to time")
    be.add_argument("--reps", type=int, help="timed repetitions")
    return parser


def _parse_ratios(value) -> tuple[float, float, float]:
    if isinstance(value, str):
        parts = value.split(",")
    else:
        parts = list(value)
    if len(parts) != 3:
        raise ConfigError(f"ratios need 3 components, got {value!r}")
    try:
        weights = [float(Fraction(str(p).strip())) for p in parts]
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigError(f"bad ratios {value!r}: {exc}") from None
    total = sum(weights)
    if any(w < 0 for w in weights) or total <= 0:
        raise ConfigError(f"ratios must be nonnegative with a positive sum, got {value!r}")
    return tuple(w / total for w in weights)


def _int_tuple(name, value) -> tuple[int, ...]:
    try:
        out = tuple(int(v) for v in value)
    except (TypeError, ValueError):
        raise ConfigError(f"{name} must be a list of integers, got {value!r}") from None
    return out


def _thread_cap() -> int | None:
    raw = os.environ.get(THREADS_ENV)
    if raw is None:
        return None
    try:
        threads = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    if threads < 1:
        raise ConfigError(f"{THREADS_ENV} must be >= 1, got {threads}")
    # Best effort: caps BLAS pools that read these on first use. Only
    # fills unset variables so explicit user settings win.
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, str(threads))
    return threads


def effective_config(args: argparse.Namespace) -> RunConfig:
    """Merge flags over config-file values over built-in defaults."""
    supplied = {
        k: v
        for k, v in vars(args).items()
        if k not in ("command", "config") and v is not None
    }
    merged = dict(_DEFAULTS)
    config_path = getattr(args, "config", None)
    if config_path:
        with open(config_path, encoding="utf-8") as fh:
            try:
                file_values = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config file {config_path}: {exc}") from None
        if not isinstance(file_values, dict):
            raise ConfigError(f"config file {config_path} must hold a JSON object")
        unknown = sorted(set(file_values) - set(_DEFAULTS))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        merged.update(file_values)
    merged.update(supplied)

    merged["ratios"] = _parse_ratios(merged["ratios"])
    size = merged["image_size"]
    if isinstance(size, (list, tuple)):
        merged["image_size"] = tuple(int(s) for s in size)
    else:
        merged["image_size"] = (int(size), int(size))
    for key in ("encoder_channels", "ef_hidden", "classifier_hidden"):
        if merged[key] is not None:
            merged[key] = _int_tuple(key, merged[key])
    cfg = RunConfig(command=args.command, threads=_thread_cap(), **merged)
    _validate(cfg)
    return cfg


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise ConfigError(message)


def _validate(cfg: RunConfig) -> None:
    for name in ("seed", "epochs", "batch", "reps", "count", "spiral_len", "n_cycles"):
        value = getattr(cfg, name)
        _require(isinstance(value, int), f"{name} must be an integer, got {value!r}")
    for name in ("n_disks", "window", "stride", "cycle_len", "limit"):
        value = getattr(cfg, name)
        _require(
            value is None or isinstance(value, int),
            f"{name} must be an integer, got {value!r}",
        )
    _require(cfg.epochs >= 1, f"epochs must be >= 1, got {cfg.epochs}")
    _require(cfg.batch >= 1, f"batch must be >= 1, got {cfg.batch}")
    _require(cfg.reps >= 1, f"reps must be >= 1, got {cfg.reps}")
    _require(cfg.count >= 0, f"count must be >= 0, got {cfg.count}")
    _require(cfg.spiral_len >= 2, f"spiral-len must be >= 2, got {cfg.spiral_len}")
    _require(cfg.n_cycles >= 1, f"n-cycles must be >= 1, got {cfg.n_cycles}")
    _require(
        math.isfinite(cfg.lr) and cfg.lr > 0, f"lr must be positive, got {cfg.lr}"
    )
    _require(0 < cfg.lr_decay <= 1, f"lr-decay must be in (0, 1], got {cfg.lr_decay}")
    _require(cfg.lambda_ef >= 0, f"lambda-ef must be >= 0, got {cfg.lambda_ef}")
    _require(cfg.lambda_cls >= 0, f"lambda-cls must be >= 0, got {cfg.lambda_cls}")
    _require(
        0 <= cfg.noise_level <= 1, f"noise-level must be in [0, 1], got {cfg.noise_level}"
    )
    _require(
        all(s >= 16 for s in cfg.image_size),
        f"image-size must be >= 16, got {cfg.image_size}",
    )
    _require(cfg.split in SPLIT_NAMES, f"split must be one of {SPLIT_NAMES}")
    _require(
        isinstance(cfg.descent_guard, bool),
        f"descent_guard must be true or false, got {cfg.descent_guard!r}",
    )
    for name, value, lo in (
        ("n-disks", cfg.n_disks, 1),
        ("window", cfg.window, 2),
        ("stride", cfg.stride, 1),
        ("cycle-len", cfg.cycle_len, 2),
        ("limit", cfg.limit, 1),
    ):
        _require(
            value is None or value >= lo, f"{name} must be >= {lo}, got {value}"
        )
    if cfg.command == "train":
        _require(cfg.mode in MODES, f"train needs --mode from {MODES}")
        _require(cfg.data is not None, "train needs --data")
        _require(cfg.out is not None, "train needs --out")
    elif cfg.command == "gen-data":
        _require(cfg.out is not None, "gen-data needs --out")
    elif cfg.command == "infer-frame":
        _require(cfg.data is not None and cfg.ckpt is not None,
                 "infer-frame needs --data and --ckpt")
        _require(cfg.out is not None, "infer-frame needs --out")
    elif cfg.command == "infer-video":
        _require(cfg.mode in _VIDEO_MODES,
                 f"infer-video needs --mode from {_VIDEO_MODES}")
        _require(cfg.data is not None and cfg.ckpt is not None,
                 "infer-video needs --data and --ckpt")
        if cfg.mode == "two-stage":
            _require(cfg.frame_ckpt is not None,
                     "two-stage mode needs --frame-ckpt (single-frame model)")
    elif cfg.command == "eval":
        _require(cfg.data is not None and cfg.ckpt is not None,
                 "eval needs --data and --ckpt")
        _require(cfg.out is not None, "eval needs --out")
    elif cfg.command == "bench":
        _require(cfg.ckpt is not None, "bench needs --ckpt")


# ---------------------------------------------------------------------------
# report plumbing


def _jsonable(value):
    """Recursively convert to JSON-safe types; non-finite floats -> null."""
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return [_jsonable(v) for v in value.tolist()]
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        v = float(value)
        return v if math.isfinite(v) else None
    if isinstance(value, Path):
        return str(value)
    return value


def _write_report(cfg: RunConfig, report: dict, filename: str | None) -> str:
    report = dict(report)
    report["config"] = asdict(cfg)
    text = json.dumps(_jsonable(report), indent=2, sort_keys=True)
    if filename is not None and cfg.out is not None:
        atomic_write_text(Path(cfg.out) / filename, text + "\n")
    return text


def _forward_batched(model, frames: np.ndarray, batch: int = 64) -> np.ndarray:
    outs = [
        model.forward(frames[i : i + batch]) for i in range(0, len(frames), batch)
    ]
    return np.concatenate(outs, axis=0)


# ---------------------------------------------------------------------------
# commands


def _cmd_gen_data(cfg: RunConfig) -> tuple[dict, str | None]:
    stats = generate_dataset(
        cfg.out,
        cfg.count,
        cfg.seed,
        image_size=cfg.image_size,
        noise_level=cfg.noise_level,
        n_cycles=cfg.n_cycles,
        cycle_len=cfg.cycle_len,
        ratios=cfg.ratios,
    )
    report = {"command": "gen-data", "out": cfg.out, **stats}
    # No report file inside the dataset: reruns must stay byte-identical,
    # so the generation record goes to stdout only.
    return report, None


def _model_config_from(cfg: RunConfig, image_size: tuple[int, int]) -> ModelConfig:
    overrides = {}
    for key in ("feature_width", "decoder_width", "gamma_hidden",
                "encoder_channels", "ef_hidden", "classifier_hidden"):
        value = getattr(cfg, key)
        if value is not None:
            overrides[key] = value
    return ModelConfig(
        mode=cfg.mode,
        spiral_len=cfg.spiral_len,
        clip_len=16 if cfg.window is None else cfg.window,
        image_size=image_size,
        n_disks=20 if cfg.n_disks is None else cfg.n_disks,
        **overrides,
    )


def _cmd_train(cfg: RunConfig) -> tuple[dict, str | None]:
    cases = load_annotated_cases(cfg.data)
    if not cases:
        raise ConfigError(f"no cases in {cfg.data}")
    first_id = sorted(cases)[0]
    image_size = case_video(cfg.data, first_id).shape[1:]
    if cfg.ckpt is not None:
        model = load_checkpoint(cfg.ckpt)
        if model.config.mode != cfg.mode:
            raise ConfigError(
                f"checkpoint is {model.config.mode}, requested {cfg.mode}"
            )
    else:
        model = build_model(_model_config_from(cfg, image_size), seed=cfg.seed)
    if model.config.image_size != tuple(image_size):
        raise ConfigError(
            f"model expects {model.config.image_size} frames, dataset has {tuple(image_size)}"
        )

    has_val = any(c.split == "val" for c in cases.values())
    if cfg.mode == "single_frame":
        data = load_frame_dataset(cfg.data, "train", limit=cfg.limit)
        val = load_frame_dataset(cfg.data, "val") if has_val else None
    else:
        if cfg.limit is not None:
            raise ConfigError("--limit only applies to single_frame training")
        labeled = cfg.mode == "multi_frame_classifier"
        data = load_clip_dataset(
            cfg.data, "train", model.config.clip_len,
            labeled_frames=labeled, seed=cfg.seed,
        )
        val = (
            load_clip_dataset(
                cfg.data, "val", model.config.clip_len,
                labeled_frames=labeled, seed=cfg.seed,
            )
            if has_val
            else None
        )

    out_dir = Path(cfg.out)
    ckpt_path = out_dir / "model.egrf"
    schedule = TrainSchedule(
        epochs=cfg.epochs,
        batch_size=cfg.batch,
        lr=cfg.lr,
        lr_decay=cfg.lr_decay,
        lambda_ef=cfg.lambda_ef,
        lambda_cls=cfg.lambda_cls,
        seed=cfg.seed,
        checkpoint_path=ckpt_path,
        descent_guard=cfg.descent_guard,
    )
    report = train(model, data, schedule, val_data=val)
    atomic_write_text(out_dir / "losses.csv", report.to_csv())
    summary = {
        "command": "train",
        "model": asdict(model.config),
        "samples": len(data),
        "val_samples": None if val is None else len(val),
        "epochs": len(report.train),
        "steps": report.steps,
        "rejected_epochs": report.rejected_epochs,
        "best_epoch": report.best_epoch,
        "best_kp_loss": report.best_kp,
        "final_train_loss": report.train[-1].loss,
        "final_val_loss": report.val[-1].loss if report.val else None,
        "checkpoint": ckpt_path,
        "losses_csv": out_dir / "losses.csv",
    }
    return summary, "train_report.json"


def _cmd_infer_frame(cfg: RunConfig) -> tuple[dict, str | None]:
    model = load_checkpoint(cfg.ckpt)
    if not isinstance(model, SingleFrameModel):
        raise ConfigError(
            f"infer-frame needs a single_frame checkpoint, got {model.config.mode}"
        )
    video = read_video(cfg.data)
    kps = _forward_batched(model, video.astype(model.config.np_dtype))
    case_id = Path(cfg.data).stem
    n = model.config.n_keypoints
    header = ["case_id", "frame_idx"]
    for i in range(n):
        header += [f"x{i}", f"y{i}"]
    lines = [",".join(header)]
    for t, kp in enumerate(kps):
        coords = ",".join(f"{v:.6f}" for v in np.asarray(kp, dtype=np.float64).ravel())
        lines.append(f"{case_id},{t},{coords}")
    out_dir = Path(cfg.out)
    atomic_write_text(out_dir / "keypoints.csv", "\n".join(lines) + "\n")
    report = {
        "command": "infer-frame",
        "case_id": case_id,
        "frames": int(len(video)),
        "keypoints": n,
        "keypoints_csv": out_dir / "keypoints.csv",
    }
    return report, "infer_frame_report.json"


def _cmd_infer_video(cfg: RunConfig) -> tuple[dict, str | None]:
    video = read_video(cfg.data)
    report: dict = {"command": "infer-video", "mode": cfg.mode, "frames": int(len(video))}
    if cfg.mode == "classifier":
        model = load_checkpoint(cfg.ckpt)
        if not isinstance(model, MultiFrameModel) or model.config.mode != "multi_frame_classifier":
            raise ConfigError("classifier mode needs a multi_frame_classifier checkpoint")
        result = sliding_window_ef(model, video.astype(model.config.np_dtype), stride=cfg.stride)
        report["status"] = "ok"
        report["mean_ef"] = result.mean_ef
        report["windows"] = [
            {
                "start": w.start,
                "ed_index": w.ed_index,
                "es_index": w.es_index,
                "ef_regressed": w.ef_regressed,
                "ef_from_keypoints": w.ef_from_keypoints,
                "status": w.status,
            }
            for w in result.windows
        ]
    else:
        frame_model = load_checkpoint(cfg.frame_ckpt)
        clip_model = load_checkpoint(cfg.ckpt)
        result = two_stage_ef(
            frame_model, clip_model, video.astype(frame_model.config.np_dtype),
            n_disks=cfg.n_disks,
        )
        report["status"] = result.status
        report["mean_ef"] = result.mean_ef
        report["volumes"] = result.volumes
        report["cycles"] = [
            {
                "ed_index": c.pair.ed_index,
                "es_index": c.pair.es_index,
                "ef_regressed": c.ef_regressed,
                "ef_from_keypoints": c.ef_from_keypoints,
            }
            for c in result.cycles
        ]
    return report, "ef_report.json"


def _kp_set(points, model_config) -> KeypointSet:
    return KeypointSet(
        np.asarray(points, dtype=np.float64),
        apex_index=model_config.apex_index,
        basal_indices=model_config.basal_indices,
    )


def _eval_single_frame(model, cases, data_dir, n_disks):
    rows, efs_pred, efs_true = [], [], []
    for case in cases:
        video = case_video(data_dir, case.case_id).astype(model.config.np_dtype)
        key_frames = sorted(list(case.ed_indices) + list(case.es_indices))
        preds = _forward_batched(model, video[key_frames])
        by_frame = dict(zip(key_frames, preds))
        for t in key_frames:
            scores = score_case(by_frame[t], case.points[t], grid=model.config.image_size)
            rows.append({
                "case_id": case.case_id,
                "frame_idx": t,
                "phase": "ED" if t in case.ed_indices else "ES",
                "dice": scores.dice,
                "mke_pct": scores.mke,
                "hausdorff_px": scores.hausdorff,
            })
        try:
            efs_pred.append(ef_from_keypoints(
                _kp_set(by_frame[case.ed_indices[0]], model.config),
                _kp_set(by_frame[case.es_indices[0]], model.config),
                n_disks,
            ))
        except EchoGraphError:
            efs_pred.append(float("nan"))
        efs_true.append(case.ef)
    fields = ["case_id", "frame_idx", "phase", "dice", "mke_pct", "hausdorff_px"]
    return rows, fields, np.asarray(efs_pred), np.asarray(efs_true)


def _eval_multi_known(model, cases, data_dir):
    rows, efs_reg, efs_kp, efs_true = [], [], [], []
    clip_len = model.config.clip_len
    for case in cases:
        video = case_video(data_dir, case.case_id).astype(model.config.np_dtype)
        case_reg = []
        for k, (ed, es) in enumerate(zip(case.ed_indices, case.es_indices)):
            idx = resample_cycle_indices(ed, es, clip_len)
            pred = multi_frame_forward(model, video[idx])
            scores_ed = score_case(pred.ed_keypoints, case.points[ed],
                                   grid=model.config.image_size)
            scores_es = score_case(pred.es_keypoints, case.points[es],
                                   grid=model.config.image_size)
            rows.append({
                "case_id": case.case_id,
                "cycle": k,
                "dice": 0.5 * (scores_ed.dice + scores_es.dice),
                "mke_pct": 0.5 * (scores_ed.mke + scores_es.mke),
                "hausdorff_px": max(scores_ed.hausdorff, scores_es.hausdorff),
                "ef_regressed": pred.ef_regressed,
                "ef_from_keypoints": pred.ef_from_keypoints,
                "ef_true": case.ef,
            })
            case_reg.append((pred.ef_regressed, pred.ef_from_keypoints))
        efs_reg.append(np.mean([r for r, _ in case_reg]))
        efs_kp.append(np.mean([k for _, k in case_reg]))
        efs_true.append(case.ef)
    fields = ["case_id", "cycle", "dice", "mke_pct", "hausdorff_px",
              "ef_regressed", "ef_from_keypoints", "ef_true"]
    return rows, fields, np.asarray(efs_reg), np.asarray(efs_kp), np.asarray(efs_true)


def _eval_classifier(model, cases, data_dir, stride):
    rows, efs_reg, efs_true = [], [], []
    hits = total = swapped = 0
    for case in cases:
        video = case_video(data_dir, case.case_id).astype(model.config.np_dtype)
        result = sliding_window_ef(model, video, stride=stride)
        for w in result.windows:
            lo, hi = w.start, w.start + model.config.clip_len
            true_ed = [t for t in case.ed_indices if lo <= t < hi]
            true_es = [t for t in case.es_indices if lo <= t < hi]
            # Only windows framing one full cycle have a decidable truth.
            decidable = (
                len(true_ed) == 1 and len(true_es) == 1 and true_ed[0] < true_es[0]
            )
            row = {
                "case_id": case.case_id,
                "start": w.start,
                "ed_pred": w.ed_index,
                "es_pred": w.es_index,
                "ed_true": true_ed[0] if decidable else "",
                "es_true": true_es[0] if decidable else "",
                "ef_regressed": w.ef_regressed,
                "ef_true": case.ef,
                "status": w.status,
            }
            rows.append(row)
            swapped += w.status == "swapped_order"
            if decidable:
                total += 1
                hits += (
                    abs(w.ed_index - true_ed[0]) <= 2
                    and abs(w.es_index - true_es[0]) <= 2
                )
        efs_reg.append(result.mean_ef)
        efs_true.append(case.ef)
    fields = ["case_id", "start", "ed_pred", "es_pred", "ed_true", "es_true",
              "ef_regressed", "ef_true", "status"]
    extra = {
        "windows": len(rows),
        "decidable_windows": total,
        "edes_hit_rate": hits / total if total else None,
        "swapped_windows": swapped,
    }
    return rows, fields, np.asarray(efs_reg), np.asarray(efs_true), extra


def _cmd_eval(cfg: RunConfig) -> tuple[dict, str | None]:
    model = load_checkpoint(cfg.ckpt)
    all_cases = load_annotated_cases(cfg.data)
    cases = [all_cases[cid] for cid in sorted(all_cases)
             if all_cases[cid].split == cfg.split]
    if not cases:
        raise ConfigError(f"split {cfg.split!r} of {cfg.data} is empty")
    n_disks = model.config.n_disks if cfg.n_disks is None else cfg.n_disks
    mode = model.config.mode
    report: dict = {
        "command": "eval",
        "model_mode": mode,
        "cases": len(cases),
    }
    if mode == "single_frame":
        rows, fields, efs_pred, efs_true = _eval_single_frame(
            model, cases, cfg.data, n_disks
        )
        valid = np.isfinite(efs_pred)
        report["ef_from_keypoints"] = (
            asdict(ef_metrics(efs_pred[valid], efs_true[valid])) if valid.any() else None
        )
        report["degenerate_ef_cases"] = int((~valid).sum())
    elif mode == "multi_frame_known":
        rows, fields, efs_reg, efs_kp, efs_true = _eval_multi_known(
            model, cases, cfg.data
        )
        report["ef_regressed"] = asdict(ef_metrics(efs_reg, efs_true))
        valid = np.isfinite(efs_kp)
        report["ef_from_keypoints"] = (
            asdict(ef_metrics(efs_kp[valid], efs_true[valid])) if valid.any() else None
        )
        report["degenerate_ef_cases"] = int((~valid).sum())
    else:
        rows, fields, efs_reg, efs_true, extra = _eval_classifier(
            model, cases, cfg.data, cfg.stride
        )
        report["ef_regressed"] = asdict(ef_metrics(efs_reg, efs_true))
        report.update(extra)
    for column in ("dice", "mke_pct", "hausdorff_px"):
        if rows and column in rows[0]:
            report[column] = summary_stats([r[column] for r in rows])
    out_dir = Path(cfg.out)
    atomic_write_text(out_dir / "cases.csv", format_case_csv(rows, fields))
    report["cases_csv"] = out_dir / "cases.csv"
    return report, "eval_report.json"


def _cmd_bench(cfg: RunConfig) -> tuple[dict, str | None]:
    model = load_checkpoint(cfg.ckpt)
    mc = model.config
    rng = np.random.default_rng(cfg.seed)
    if isinstance(model, MultiFrameModel):
        shape = (1, mc.clip_len, *mc.image_size)
        frames_per_pass = mc.clip_len
    else:
        shape = (1, *mc.image_size)
        frames_per_pass = 1
    x = rng.uniform(size=shape).astype(mc.np_dtype)
    for _ in range(BENCH_WARMUP):
        model.forward(x)
    times_ms = np.empty(cfg.reps)
    for i in range(cfg.reps):
        t0 = time.perf_counter()
        model.forward(x)
        times_ms[i] = (time.perf_counter() - t0) * 1e3
    per_frame = times_ms / frames_per_pass
    counted = parameter_count(model.parameters())
    report = {
        "command": "bench",
        "model_mode": mc.mode,
        "image_size": list(mc.image_size),
        "frames_per_pass": frames_per_pass,
        "reps": cfg.reps,
        "warmup": BENCH_WARMUP,
        "per_frame_ms": {
            "median": float(np.percentile(per_frame, 50)),
            "p5": float(np.percentile(per_frame, 5)),
            "p95": float(np.percentile(per_frame, 95)),
        },
        "parameter_count": counted,
        "parameter_count_formula": expected_parameter_count(mc),
    }
    return report, "bench_report.json"


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "infer-frame": _cmd_infer_frame,
    "infer-video": _cmd_infer_video,
    "eval": _cmd_eval,
    "bench": _cmd_bench,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = effective_config(args)
        report, filename = _COMMANDS[cfg.command](cfg)
        print(_write_report(cfg, report, filename))
    except (EchoGraphError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
