"""Mini-batch training with Adam (or SGD), global-norm clipping and early stopping."""

from __future__ import annotations

import csv
import io
import itertools
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .dataset import WindowSet
from .dgru import DgruModel, backward_batch, decide, forward_batch, init_model, predict_proba
from .errors import ConfigError, DivergenceError, ShapeError
from .numerics import batch_cross_entropy, make_rng

log = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 128
    max_epochs: int = 100
    patience: int = 10
    grad_clip_norm: float = 5.0
    seed: int = 0
    optimizer: str = "adam"

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 1:
            raise ConfigError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")
        if not self.grad_clip_norm > 0:
            raise ConfigError(f"grad_clip_norm must be > 0, got {self.grad_clip_norm}")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_accuracy: float


@dataclass
class TrainReport:
    records: list = field(default_factory=list)
    best_epoch: int = 0
    stopped_epoch: int = 0
    stopped_early: bool = False
    stop_reason: str = ""

    def to_dict(self):
        return {"best_epoch": self.best_epoch, "stopped_epoch": self.stopped_epoch,
                "stopped_early": self.stopped_early, "stop_reason": self.stop_reason,
                "records": [asdict(r) for r in self.records]}


@dataclass
class OptimizerState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros_like(cls, model: DgruModel):
        return cls({n: np.zeros_like(a) for n, a in model.named_parameters()},
                   {n: np.zeros_like(a) for n, a in model.named_parameters()})


def _check_grads(model, grads):
    for name, arr in model.named_parameters():
        g = grads.get(name)
        if g is None or g.shape != arr.shape:
            raise ShapeError(f"gradient for {name} has shape {getattr(g, 'shape', None)}, expected {arr.shape}")
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient in parameter {name}")


def global_norm(grads):
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_by_global_norm(grads, max_norm):
    """Scale all gradients together so their joint L2 norm is at most ``max_norm``."""
    norm = global_norm(grads)
    if norm <= max_norm:
        return grads, norm
    scale = max_norm / norm
    return {n: g * scale for n, g in grads.items()}, norm


def adam_step(model: DgruModel, grads, state: OptimizerState, lr, clip_norm=None):
    """In-place Adam update with bias correction; returns ``(model, state)``."""
    _check_grads(model, grads)
    if clip_norm is not None:
        grads, _ = clip_by_global_norm(grads, clip_norm)
    state.step += 1
    c1 = 1.0 - ADAM_BETA1 ** state.step
    c2 = 1.0 - ADAM_BETA2 ** state.step
    for name, p in model.named_parameters():
        g = grads[name]
        m, v = state.m[name], state.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
    return model, state


def sgd_step(model: DgruModel, grads, lr, clip_norm=None):
    _check_grads(model, grads)
    if clip_norm is not None:
        grads, _ = clip_by_global_norm(grads, clip_norm)
    for name, p in model.named_parameters():
        p -= lr * grads[name]
    return model


def evaluate_split(model: DgruModel, ws: WindowSet, batch_size=512):
    """Mean clamped cross-entropy and argmax accuracy over a window set."""
    probs = predict_proba(model, ws.values, batch_size)
    labels = ws.labels.astype(np.int64)
    loss = float(np.mean(batch_cross_entropy(probs, labels)))
    acc = float(np.mean(decide(probs) == labels))
    return loss, acc


def train(model: DgruModel, train_set: WindowSet, val_set: WindowSet, cfg: TrainConfig = TrainConfig(),
          evaluate: Optional[Callable] = None, on_epoch: Optional[Callable] = None):
    """Train ``model`` in place and return ``(best_snapshot, report)``.

    ``evaluate(model, val_set) -> (loss, accuracy)`` replaces the validation
    pass when given. ``on_epoch(record, model)`` runs after every epoch; a
    truthy return value stops training.
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise ShapeError("training and validation sets must be nonempty")
    if train_set.window_size != model.window_size or val_set.window_size != model.window_size:
        raise ShapeError(f"instances have length {train_set.window_size}, model expects {model.window_size}")
    evaluate = evaluate or evaluate_split
    rng = make_rng(cfg.seed)
    state = OptimizerState.zeros_like(model)
    report = TrainReport()
    best_loss = math.inf
    best_model = model.copy()
    wait = 0
    n = len(train_set)
    labels = train_set.labels.astype(np.int64)

    for epoch in range(1, cfg.max_epochs + 1):
        perm = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            probs, trace = forward_batch(model, train_set.values[idx])
            batch_loss = batch_cross_entropy(probs, labels[idx])
            total += float(np.sum(batch_loss))
            if not np.all(np.isfinite(batch_loss)):
                raise DivergenceError(f"non-finite training loss in epoch {epoch}", report)
            grads = backward_batch(model, trace, labels[idx])
            try:
                if cfg.optimizer == "adam":
                    adam_step(model, grads, state, cfg.learning_rate, cfg.grad_clip_norm)
                else:
                    sgd_step(model, grads, cfg.learning_rate, cfg.grad_clip_norm)
            except DivergenceError as e:
                e.report = report
                raise
        val_loss, val_acc = evaluate(model, val_set)
        if not math.isfinite(val_loss):
            raise DivergenceError(f"non-finite validation loss in epoch {epoch}", report)
        rec = EpochRecord(epoch, total / n, float(val_loss), float(val_acc))
        report.records.append(rec)
        report.stopped_epoch = epoch
        log.info("epoch %d train_loss=%.6f val_loss=%.6f val_acc=%.4f", epoch, rec.train_loss,
                 rec.val_loss, rec.val_accuracy)

        if val_loss < best_loss:
            best_loss = val_loss
            best_model = model.copy()
            report.best_epoch = epoch
            wait = 0
        else:
            wait += 1
        if on_epoch is not None and on_epoch(rec, model):
            report.stop_reason = "callback"
            break
        if wait >= cfg.patience:
            report.stopped_early = True
            report.stop_reason = "patience"
            break
    else:
        report.stop_reason = "max_epochs"
    return best_model, report


# ---------------------------------------------------------------------------
# Epoch log: comment lines with the run config, then a CSV table

EPOCH_LOG_COLUMNS = ("epoch", "train_loss", "val_loss", "val_accuracy")


def format_epoch_log(records, meta=None):
    buf = io.StringIO()
    if meta is not None:
        buf.write("# " + json.dumps(meta, sort_keys=True) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(EPOCH_LOG_COLUMNS)
    for r in records:
        w.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss), repr(r.val_accuracy)])
    return buf.getvalue()


def write_epoch_log(path, records, meta=None):
    Path(path).write_text(format_epoch_log(records, meta))


def parse_epoch_log(text):
    lines = [ln for ln in text.splitlines() if ln and not ln.startswith("#")]
    rows = list(csv.reader(lines))
    if not rows or tuple(rows[0]) != EPOCH_LOG_COLUMNS:
        raise ValueError(f"epoch log must start with header {','.join(EPOCH_LOG_COLUMNS)}")
    return [EpochRecord(int(e), float(tl), float(vl), float(va)) for e, tl, vl, va in rows[1:]]


def read_epoch_log(path):
    return parse_epoch_log(Path(path).read_text())


# ---------------------------------------------------------------------------
# Config sweep


@dataclass(frozen=True)
class SweepRow:
    index: int
    learning_rate: float
    hidden_dim: int
    batch_size: int
    patience: int
    seed: int
    best_epoch: int = 0
    stopped_epoch: int = 0
    best_val_loss: float = math.nan
    best_val_accuracy: float = math.nan


def sweep_grid(learning_rates, hidden_dims, batch_sizes, patiences, base_seed=0):
    """Cartesian product of the listed values; row seeds are ``base_seed + row index``."""
    rows = []
    for i, (lr, h, b, p) in enumerate(itertools.product(learning_rates, hidden_dims, batch_sizes, patiences)):
        rows.append(SweepRow(i, float(lr), int(h), int(b), int(p), int(base_seed) + i))
    return rows


def sweep(train_set, val_set, rows, base_cfg: TrainConfig = TrainConfig(), n_layers=2, norm=None):
    """Train one model per row; returns ``(completed_rows, best_row, best_model)`` by best validation loss."""
    done = []
    best = (math.inf, None, None)
    for row in rows:
        cfg = replace(base_cfg, learning_rate=row.learning_rate, batch_size=row.batch_size,
                      patience=row.patience, seed=row.seed)
        model = init_model(row.seed, train_set.values.shape[2], (row.hidden_dim,) * n_layers,
                           window_size=train_set.window_size, norm=norm)
        trained, report = train(model, train_set, val_set, cfg)
        rec = report.records[report.best_epoch - 1]
        out = replace(row, best_epoch=report.best_epoch, stopped_epoch=report.stopped_epoch,
                      best_val_loss=rec.val_loss, best_val_accuracy=rec.val_accuracy)
        done.append(out)
        if rec.val_loss < best[0]:
            best = (rec.val_loss, out, trained)
    return done, best[1], best[2]


def format_sweep_table(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    cols = list(SweepRow.__dataclass_fields__)
    w.writerow(cols)
    for r in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in (getattr(r, c) for c in cols)])
    return buf.getvalue()
