"""Confusion counts, accuracy/precision/recall/F1 and the evaluation report file."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .dataset import FALL, LABEL_NAMES, NONFALL
from .errors import DataError
from .training import format_epoch_log

REPORT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class ConfusionMatrix:
    """Counts with fall as the positive class."""

    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self):
        return self.tp + self.fp + self.tn + self.fn

    def swapped(self):
        """The same counts viewed with non-fall as the positive class."""
        return ConfusionMatrix(tp=self.tn, fp=self.fn, tn=self.tp, fn=self.fp)


@dataclass(frozen=True)
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    support: int


@dataclass(frozen=True)
class EvalReport:
    confusion: ConfusionMatrix
    per_class: dict  # {"fall": ClassMetrics, "non-fall": ClassMetrics}
    weighted_avg: ClassMetrics
    accuracy: float

    def to_dict(self):
        return {
            "confusion": asdict(self.confusion),
            "per_class": {k: asdict(v) for k, v in self.per_class.items()},
            "weighted_avg": asdict(self.weighted_avg),
            "accuracy": self.accuracy,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(ConfusionMatrix(**d["confusion"]),
                   {k: ClassMetrics(**v) for k, v in d["per_class"].items()},
                   ClassMetrics(**d["weighted_avg"]), d["accuracy"])


def _ratio(num, den):
    # zero denominator -> 0 so weighted averages stay defined
    return num / den if den else 0.0


def confusion(preds, labels) -> ConfusionMatrix:
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.shape != labels.shape or preds.ndim != 1:
        raise DataError(f"predictions {preds.shape} and labels {labels.shape} must be 1-D and equal length")
    if preds.size == 0:
        raise DataError("cannot score zero instances")
    pf = preds == FALL
    lf = labels == FALL
    return ConfusionMatrix(tp=int(np.sum(pf & lf)), fp=int(np.sum(pf & ~lf)),
                           tn=int(np.sum(~pf & ~lf)), fn=int(np.sum(~pf & lf)))


def accuracy(cm: ConfusionMatrix):
    return _ratio(cm.tp + cm.tn, cm.total)


def precision(tp, fp):
    return _ratio(tp, tp + fp)


def recall(tp, fn):
    return _ratio(tp, tp + fn)


def f1_score(p, r):
    return _ratio(2 * p * r, p + r)


def class_metrics(cm: ConfusionMatrix) -> ClassMetrics:
    """Metrics for whichever class ``cm`` treats as positive."""
    p = precision(cm.tp, cm.fp)
    r = recall(cm.tp, cm.fn)
    return ClassMetrics(p, r, f1_score(p, r), cm.tp + cm.fn)


def weighted_average(per_class):
    """Support-weighted mean of precision, recall and F1 over the given classes."""
    rows = list(per_class)
    total = sum(m.support for m in rows)
    return ClassMetrics(
        _ratio(sum(m.support * m.precision for m in rows), total),
        _ratio(sum(m.support * m.recall for m in rows), total),
        _ratio(sum(m.support * m.f1 for m in rows), total),
        total,
    )


def report_from_confusion(cm: ConfusionMatrix) -> EvalReport:
    if cm.total == 0:
        raise DataError("cannot build a report from zero instances")
    fall = class_metrics(cm)
    non = class_metrics(cm.swapped())
    return EvalReport(cm, {LABEL_NAMES[FALL]: fall, LABEL_NAMES[NONFALL]: non},
                      weighted_average([non, fall]), accuracy(cm))


def report(preds, labels) -> EvalReport:
    return report_from_confusion(confusion(preds, labels))


# ---------------------------------------------------------------------------
# Report document


def format_report(rep: EvalReport, meta=None):
    doc = {"format_version": REPORT_FORMAT_VERSION, **rep.to_dict()}
    if meta is not None:
        doc["meta"] = meta
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def parse_report(text) -> EvalReport:
    doc = json.loads(text)
    if doc.get("format_version") != REPORT_FORMAT_VERSION:
        raise DataError(f"unsupported report format_version {doc.get('format_version')!r}")
    return EvalReport.from_dict(doc)


def format_table(rep: EvalReport):
    """Plain-text table laid out like a classification report."""
    lines = [f"{'':14s}{'precision':>10s}{'recall':>10s}{'f1':>10s}{'support':>10s}"]
    for name in (LABEL_NAMES[NONFALL], LABEL_NAMES[FALL]):
        m = rep.per_class[name]
        lines.append(f"{name:14s}{m.precision:10.3f}{m.recall:10.3f}{m.f1:10.3f}{m.support:10d}")
    w = rep.weighted_avg
    lines.append(f"{'weighted avg':14s}{w.precision:10.3f}{w.recall:10.3f}{w.f1:10.3f}{w.support:10d}")
    lines.append(f"accuracy {100 * rep.accuracy:.1f}%")
    c = rep.confusion
    lines.append(f"confusion tp={c.tp} fp={c.fp} tn={c.tn} fn={c.fn}")
    return "\n".join(lines) + "\n"


def emit_report(rep: EvalReport, epoch_log, destination, meta=None):
    """Write ``report.json``, ``report.txt`` and (when given) ``epoch_log.csv`` into ``destination``.

    Output is byte-stable for identical inputs.
    """
    if rep is None or rep.confusion.total == 0:
        raise DataError("refusing to emit a report over zero instances")
    d = Path(destination)
    d.mkdir(parents=True, exist_ok=True)
    (d / "report.json").write_text(format_report(rep, meta))
    (d / "report.txt").write_text(format_table(rep))
    if epoch_log is not None:
        (d / "epoch_log.csv").write_text(format_epoch_log(epoch_log, meta))
    return d
