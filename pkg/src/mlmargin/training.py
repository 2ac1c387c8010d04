"""Training loop: sharpness-aware steps, one-cycle schedule, weight averaging.

Each epoch shuffles the training set with a seeded generator, takes one
two-phase optimizer step per batch at the scheduled learning rate, and folds
every step into the weight average.  Validation runs twice per epoch — once
with the live weights and once with the averaged ones — and the averaged
score drives both checkpointing and the stopping rule: training stops only
when the monitored metric has not improved for ``patience`` consecutive
epochs AND the current value sits strictly below an exponential moving
average of the best-so-far sequence.

The per-epoch log is JSON lines with keys epoch, train_loss, lr, val_mAP,
ema_val_mAP, stopped.  A non-finite training loss aborts immediately,
naming the offending step.  Identical seeds produce identical logs.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from mlmargin.data import MultilabelDataset
from mlmargin.metrics import EvalReport, ThresholdVector, overall_and_per_class
from mlmargin.model import MultilabelClassifier
from mlmargin.optim import Ema, Sam, onecycle_lr

__all__ = [
    "EarlyStopTracker",
    "early_stop_check",
    "TrainingError",
    "TrainResult",
    "train",
    "predict_dataset",
    "evaluate",
]


class TrainingError(RuntimeError):
    """Training hit a state it cannot recover from (e.g. non-finite loss)."""


@dataclass
class EarlyStopTracker:
    """Stop when results stall *and* degrade.

    Tracks the best metric so far, how many epochs since it improved, and an
    exponential moving average of the running-best sequence.  ``update``
    returns True (stop) only when patience has elapsed without a new best and
    the current metric lies strictly below that average.
    """

    patience: int = 5
    beta: float = 0.9
    best: float = -math.inf
    since: int = 0
    ema: float | None = None

    def update(self, metric: float) -> bool:
        metric = float(metric)
        if not math.isfinite(metric):
            raise TrainingError(f"early-stop metric must be finite, got {metric}")
        if metric > self.best:
            self.best = metric
            self.since = 0
        else:
            self.since += 1
        if self.ema is None:
            self.ema = self.best
        else:
            self.ema = self.beta * self.ema + (1.0 - self.beta) * self.best
        return self.since >= self.patience and metric < self.ema

    def state(self) -> dict:
        return {"best": self.best, "since": self.since, "ema": self.ema,
                "patience": self.patience, "beta": self.beta}

    @classmethod
    def from_state(cls, payload: dict) -> "EarlyStopTracker":
        return cls(patience=int(payload["patience"]), beta=float(payload["beta"]),
                   best=float(payload["best"]), since=int(payload["since"]),
                   ema=None if payload["ema"] is None else float(payload["ema"]))


def early_stop_check(tracker: EarlyStopTracker, metric: float) -> bool:
    """Feed one epoch's metric to the tracker; True means stop."""
    return tracker.update(metric)


def predict_dataset(model: MultilabelClassifier, ds: MultilabelDataset,
                    batch_size: int = 256) -> np.ndarray:
    """Per-class probabilities for every sample, computed in batches."""
    chunks = [
        model.predict_proba(ds.features[i:i + batch_size])
        for i in range(0, len(ds), batch_size)
    ]
    return np.concatenate(chunks, axis=0)


def evaluate(model: MultilabelClassifier, ds: MultilabelDataset,
             thr: ThresholdVector | None = None, batch_size: int = 256) -> EvalReport:
    scores = predict_dataset(model, ds, batch_size)
    return overall_and_per_class(scores, ds.labels, thr)


@dataclass
class TrainResult:
    log: list = field(default_factory=list)
    best_ema_val_map: float = -math.inf
    best_val_map: float = -math.inf
    best_epoch: int = 0
    epochs_run: int = 0
    steps_run: int = 0
    stopped_early: bool = False
    checkpoint_path: str | None = None


def _checkpoint_arrays(model: MultilabelClassifier, opt: Sam, ema: Ema) -> dict:
    arrays = model.state_arrays()
    names = [name for name, _ in model.named_parameters()]
    for name, shadow in zip(names, ema.shadow):
        arrays[f"ema.{name}"] = shadow
    for name, buf in zip(names, opt.momentum_buffers):
        arrays[f"momentum.{name}"] = buf
    return arrays


def train(model: MultilabelClassifier, train_ds: MultilabelDataset,
          val_ds: MultilabelDataset, out_dir=None,
          shuffle_rng: np.random.Generator | None = None) -> TrainResult:
    """Run the full recipe; returns the epoch log and best metrics.

    When ``out_dir`` is given, writes ``log.jsonl`` (one record per epoch,
    appended as training progresses) and keeps ``checkpoint.ckpt`` at the
    epoch with the best averaged-weights validation mAP.
    """
    cfg = model.cfg
    if train_ds.num_classes != model.num_classes or val_ds.num_classes != model.num_classes:
        raise TrainingError(
            f"dataset has {train_ds.num_classes}/{val_ds.num_classes} classes, "
            f"model expects {model.num_classes}"
        )
    params = model.parameters()
    opt = Sam(params, rho=cfg.optim_rho, momentum=cfg.optim_momentum,
              weight_decay=cfg.optim_weight_decay)
    n = len(train_ds)
    batch = min(cfg.optim_batch_size, n)
    steps_per_epoch = math.ceil(n / batch)
    sched = cfg.onecycle_config(max(2, cfg.optim_epochs * steps_per_epoch))
    ema = Ema(params, decay=cfg.ema_decay)
    tracker = EarlyStopTracker(patience=cfg.early_stop_patience, beta=cfg.early_stop_beta)
    rng = shuffle_rng if shuffle_rng is not None else np.random.default_rng([cfg.seed, 1])

    log_path = ckpt_path = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        log_path = out / "log.jsonl"
        log_path.write_text("")
        ckpt_path = out / "checkpoint.ckpt"

    result = TrainResult()
    step = 0
    for epoch in range(1, cfg.optim_epochs + 1):
        order = rng.permutation(n)
        epoch_loss = 0.0
        lr = 0.0
        for start in range(0, n, batch):
            idx = order[start:start + batch]
            xb, yb = train_ds.features[idx], train_ds.labels[idx]
            lr = onecycle_lr(step, sched)
            loss_val = opt.step(lambda: model.loss(model.scores(xb), yb), lr)
            if not math.isfinite(loss_val):
                raise TrainingError(
                    f"non-finite training loss at step {step} (epoch {epoch})"
                )
            ema.update(params)
            step += 1
            epoch_loss += loss_val * len(idx)
        epoch_loss /= n

        val_map = evaluate(model, val_ds).mean_ap
        with ema.averaged(params):
            ema_val_map = evaluate(model, val_ds).mean_ap

        stop = early_stop_check(tracker, ema_val_map) and cfg.early_stop_enabled
        record = {
            "epoch": epoch,
            "train_loss": epoch_loss,
            "lr": lr,
            "val_mAP": val_map,
            "ema_val_mAP": ema_val_map,
            "stopped": bool(stop),
        }
        result.log.append(record)
        if log_path is not None:
            with log_path.open("a") as fh:
                fh.write(json.dumps(record) + "\n")

        result.best_val_map = max(result.best_val_map, val_map)
        result.epochs_run = epoch
        result.steps_run = step
        if ema_val_map > result.best_ema_val_map:
            result.best_ema_val_map = ema_val_map
            result.best_epoch = epoch
            if ckpt_path is not None:
                model.save(
                    ckpt_path,
                    extra_arrays=_checkpoint_arrays(model, opt, ema),
                    meta={
                        "epoch": epoch,
                        "scheduler_step": step,
                        "tracker": tracker.state(),
                        "val_mAP": val_map,
                        "ema_val_mAP": ema_val_map,
                    },
                )
                result.checkpoint_path = str(ckpt_path)
        if stop:
            result.stopped_early = True
            break
    return result
