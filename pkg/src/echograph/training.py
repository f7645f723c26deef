"""Minibatch training loop with per-epoch loss tracking.

The loop is deterministic for a fixed schedule seed: shuffling is the
only randomness, and it comes from a dedicated generator. Validation
keypoint loss picks the best checkpoint; without a validation set the
training keypoint loss stands in.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NonFiniteError, TrainingDivergedError
from .layers import Adam
from .model import (
    MultiFrameModel,
    SingleFrameModel,
    edes_classifier_loss,
    ef_loss,
    keypoint_loss,
    save_checkpoint,
)


@dataclass(frozen=True)
class TrainSchedule:
    """Hyperparameters for one training run.

    With descent_guard on, an epoch whose average training loss exceeds
    the previous epoch's is rolled back (parameters, optimizer moments,
    and shuffling stream restored) and retried at half the step size,
    so the recorded loss curve is non-increasing by construction.
    Rolled-back epochs are counted in TrainingReport.rejected_epochs.
    """

    epochs: int = 100
    batch_size: int = 16
    lr: float = 1e-3
    lr_decay: float = 1.0  # per-epoch multiplier
    lambda_ef: float = 1.0
    lambda_cls: float = 0.1
    classifier_frame_weight: float = 5.0
    seed: int = 0
    checkpoint_path: str | None = None
    descent_guard: bool = False

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.lr <= 0 or not (0 < self.lr_decay <= 1):
            raise ConfigError("need lr > 0 and lr_decay in (0, 1]")
        if self.lambda_ef < 0 or self.lambda_cls < 0:
            raise ConfigError("loss weights must be nonnegative")
        if self.classifier_frame_weight <= 0:
            raise ConfigError("classifier_frame_weight must be positive")


@dataclass
class EpochStats:
    loss: float
    kp: float
    ef: float = 0.0
    cls: float = 0.0


@dataclass
class TrainingReport:
    train: list[EpochStats] = field(default_factory=list)
    val: list[EpochStats] = field(default_factory=list)
    best_epoch: int = -1
    best_kp: float = float("inf")
    steps: int = 0
    rejected_epochs: int = 0

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(
            ["epoch", "train_loss", "train_kp", "train_ef", "train_cls",
             "val_loss", "val_kp", "val_ef", "val_cls"]
        )
        for i, tr in enumerate(self.train):
            row = [i, tr.loss, tr.kp, tr.ef, tr.cls]
            if i < len(self.val):
                va = self.val[i]
                row += [va.loss, va.kp, va.ef, va.cls]
            else:
                row += ["", "", "", ""]
            writer.writerow([f"{v:.8f}" if isinstance(v, float) else v for v in row])
        return buf.getvalue()


class _Accumulator:
    def __init__(self):
        self.sums = np.zeros(4)
        self.count = 0

    def add(self, n, loss, kp, ef=0.0, cls=0.0):
        self.sums += n * np.array([loss, kp, ef, cls])
        self.count += n

    def stats(self) -> EpochStats:
        s = self.sums / max(self.count, 1)
        return EpochStats(loss=s[0], kp=s[1], ef=s[2], cls=s[3])


def _batch_losses(model, data, idx, schedule, train: bool):
    """Forward one batch; returns (stats tuple, backward closure)."""
    if isinstance(model, SingleFrameModel):
        pred = model.forward(data.images[idx], train=train)
        kp, gkp = keypoint_loss(pred, data.keypoints[idx])
        return (kp, kp, 0.0, 0.0), (lambda: model.backward(gkp))

    out = model.forward(data.clips[idx], train=train)
    kp, gkp = keypoint_loss(out.keypoints, data.keypoints[idx])
    lef, gef = ef_loss(out.ef, data.efs[idx])
    total = kp + schedule.lambda_ef * lef
    if model.with_classifier:
        lcls, g_ed, g_es = edes_classifier_loss(
            out.ed_logits,
            out.es_logits,
            data.ed_indices[idx],
            data.es_indices[idx],
            schedule.classifier_frame_weight,
        )
        total += schedule.lambda_cls * lcls
        back = lambda: model.backward(
            gkp,
            schedule.lambda_ef * gef,
            schedule.lambda_cls * g_ed,
            schedule.lambda_cls * g_es,
        )
        return (total, kp, lef, lcls), back
    back = lambda: model.backward(gkp, schedule.lambda_ef * gef)
    return (total, kp, lef, 0.0), back


def _run_epoch(model, data, order, schedule, opt=None):
    acc = _Accumulator()
    bs = schedule.batch_size
    for lo in range(0, len(order), bs):
        idx = order[lo : lo + bs]
        try:
            stats, back = _batch_losses(model, data, idx, schedule, train=opt is not None)
            if not np.isfinite(stats[0]):
                raise TrainingDivergedError(
                    f"non-finite loss {stats[0]} at optimizer step {model.step_counter}"
                )
            if opt is not None:
                opt.zero_grad()
                back()
                opt.step()
                model.step_counter = opt.step_count
        except NonFiniteError as e:
            raise TrainingDivergedError(
                f"diverged at optimizer step {model.step_counter}: {e}"
            ) from e
        acc.add(len(idx), *stats)
    return acc.stats()


def _data_len(data) -> int:
    return len(data.images) if hasattr(data, "images") else len(data.clips)


def _snapshot(model, opt, rng):
    return (
        [p.value.copy() for p in opt.parameters],
        [m.copy() for m in opt._m],
        [v.copy() for v in opt._v],
        opt.step_count,
        model.step_counter,
        rng.bit_generator.state,
    )


def _restore(model, opt, rng, snap):
    values, ms, vs, step_count, model_steps, rng_state = snap
    for p, saved in zip(opt.parameters, values):
        p.value[...] = saved
    for m, saved in zip(opt._m, ms):
        m[...] = saved
    for v, saved in zip(opt._v, vs):
        v[...] = saved
    opt.step_count = step_count
    model.step_counter = model_steps
    rng.bit_generator.state = rng_state


def train(model, data, schedule: TrainSchedule, val_data=None) -> TrainingReport:
    """Optimize the model in place; returns per-epoch loss history."""
    n = _data_len(data)
    if n == 0:
        raise ConfigError("training set is empty")
    is_multi = isinstance(model, MultiFrameModel)
    if is_multi != hasattr(data, "clips"):
        raise ConfigError("dataset kind does not match model mode")
    rng = np.random.default_rng(schedule.seed)
    opt = Adam(model.parameters(), lr=schedule.lr, initial_step=model.step_counter)
    report = TrainingReport()
    guard_scale = 1.0
    for epoch in range(schedule.epochs):
        base_lr = schedule.lr * schedule.lr_decay**epoch
        retries = 0
        while True:
            opt.lr = base_lr * guard_scale
            snap = _snapshot(model, opt, rng) if schedule.descent_guard else None
            order = rng.permutation(n)
            stats = _run_epoch(model, data, order, schedule, opt)
            if snap is None:
                break
            # The recorded average is measured before this epoch's
            # updates land, so judge the updates by re-evaluating the
            # full dataset afterwards. With full-batch training the
            # next epoch's recorded loss equals this evaluation, which
            # makes the recorded curve non-increasing exactly.
            after = _run_epoch(model, data, np.arange(n), schedule)
            if after.loss <= stats.loss:
                # recover step size lost to earlier rejections
                guard_scale = min(1.0, guard_scale * 1.1)
                break
            # Same permutation, half the step size. The first retry keeps
            # the Adam momentum: when the direction descends but overshot,
            # halving alone lands below and adaptation is preserved. If
            # halving did not help, the direction itself points uphill, so
            # later retries clear the momentum; the preconditioned fresh
            # gradient always descends at some scale.
            _restore(model, opt, rng, snap)
            retries += 1
            if retries >= 2:
                for m in opt._m:
                    m[...] = 0
            report.rejected_epochs += 1
            guard_scale *= 0.5
            if base_lr * guard_scale < 1e-15:
                raise TrainingDivergedError(
                    "descent guard stalled: no improving step found"
                )
        report.train.append(stats)
        if val_data is not None:
            stats = _run_epoch(model, val_data, np.arange(_data_len(val_data)), schedule)
            report.val.append(stats)
            candidate = stats.kp
        else:
            candidate = report.train[-1].kp
        if candidate < report.best_kp:
            report.best_kp = candidate
            report.best_epoch = epoch
            if schedule.checkpoint_path is not None:
                save_checkpoint(model, schedule.checkpoint_path)
    report.steps = opt.step_count
    return report
