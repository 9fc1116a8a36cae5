"""Raw recordings -> labeled 40-point window instances.

Pipeline: ``parse_csv`` -> ``make_windows`` per segment -> ``balance_downsample``
-> ``split_validation``, with ``compute_norm_stats`` over the training split.
Window collections are held in a :class:`WindowSet` (stacked arrays) rather
than Python lists so that the full public datasets stay manageable.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .errors import DataError

NONFALL = 0
FALL = 1
LABEL_NAMES = {FALL: "fall", NONFALL: "non-fall"}

PREPARED_FORMAT_VERSION = 1


@dataclass(frozen=True)
class Sample:
    t: Optional[float]
    ax: float
    ay: float
    az: float
    point_label: Optional[int] = None


@dataclass
class Segment:
    """One contiguous recording. Arrays are aligned row by row."""

    segment_id: str
    acc: np.ndarray  # (N, 3)
    t: Optional[np.ndarray] = None  # (N,)
    labels: Optional[np.ndarray] = None  # (N,) of {0, 1}

    def __len__(self):
        return self.acc.shape[0]

    @property
    def samples(self):
        out = []
        for i in range(len(self)):
            out.append(Sample(
                t=None if self.t is None else float(self.t[i]),
                ax=float(self.acc[i, 0]), ay=float(self.acc[i, 1]), az=float(self.acc[i, 2]),
                point_label=None if self.labels is None else int(self.labels[i]),
            ))
        return out

    @classmethod
    def from_samples(cls, segment_id, samples):
        acc = np.array([[s.ax, s.ay, s.az] for s in samples], dtype=np.float64).reshape(-1, 3)
        ts = [s.t for s in samples]
        t = None if any(v is None for v in ts) else np.array(ts, dtype=np.float64)
        labs = [s.point_label for s in samples]
        labels = None if any(v is None for v in labs) else np.array(labs, dtype=np.int8)
        return cls(segment_id, acc, t, labels)


@dataclass(frozen=True)
class WindowConfig:
    window_size: int = 40
    fall_point_threshold: int = 25
    stride: int = 1

    def __post_init__(self):
        if self.window_size < 1:
            raise DataError(f"window_size must be >= 1, got {self.window_size}")
        if not 1 <= self.fall_point_threshold <= self.window_size:
            raise DataError(
                f"fall_point_threshold must be in [1, {self.window_size}], got {self.fall_point_threshold}")
        if self.stride < 1:
            raise DataError(f"stride must be >= 1, got {self.stride}")


@dataclass(frozen=True)
class WindowInstance:
    values: np.ndarray  # (window_size, 3)
    label: int
    source: tuple = ("", 0)  # (segment_id, start index)


@dataclass
class WindowSet:
    """A stack of window instances: ``values[i]`` is window i, ``labels[i]`` its class."""

    values: np.ndarray  # (n, W, 3)
    labels: np.ndarray  # (n,) int8
    segment_ids: list = field(default_factory=list)  # (n,) str
    starts: np.ndarray = None  # (n,) int64

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int8)
        n = self.labels.shape[0]
        if self.starts is None:
            self.starts = np.zeros(n, dtype=np.int64)
        self.starts = np.asarray(self.starts, dtype=np.int64)
        if not self.segment_ids:
            self.segment_ids = [""] * n
        if self.values.shape[0] != n or len(self.segment_ids) != n or self.starts.shape[0] != n:
            raise DataError("WindowSet arrays have inconsistent lengths")

    def __len__(self):
        return self.labels.shape[0]

    def __getitem__(self, i) -> WindowInstance:
        return WindowInstance(self.values[i], int(self.labels[i]), (self.segment_ids[i], int(self.starts[i])))

    def __iter__(self) -> Iterator[WindowInstance]:
        for i in range(len(self)):
            yield self[i]

    @property
    def window_size(self):
        return self.values.shape[1]

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return WindowSet(self.values[idx], self.labels[idx],
                         [self.segment_ids[i] for i in idx], self.starts[idx])

    def class_counts(self):
        return {"fall": int(np.sum(self.labels == FALL)), "non-fall": int(np.sum(self.labels == NONFALL))}

    @classmethod
    def empty(cls, window_size=40):
        return cls(np.zeros((0, window_size, 3)), np.zeros(0, dtype=np.int8), [], np.zeros(0, dtype=np.int64))

    @classmethod
    def from_instances(cls, instances):
        instances = list(instances)
        if not instances:
            return cls.empty()
        return cls(np.stack([w.values for w in instances]),
                   np.array([w.label for w in instances], dtype=np.int8),
                   [w.source[0] for w in instances],
                   np.array([w.source[1] for w in instances], dtype=np.int64))

    @classmethod
    def concat(cls, sets):
        sets = [s for s in sets if len(s)]
        if not sets:
            return cls.empty()
        return cls(np.concatenate([s.values for s in sets]),
                   np.concatenate([s.labels for s in sets]),
                   [sid for s in sets for sid in s.segment_ids],
                   np.concatenate([s.starts for s in sets]))


# ---------------------------------------------------------------------------
# CSV ingestion


@dataclass
class CsvSchema:
    """Column mapping for delimiter-separated recordings.

    Each column entry is a header name (requires ``has_header``) or a 0-based
    index. ``t``, ``label`` and ``segment`` may be None when absent. A change
    in the ``segment`` column's value starts a new segment.
    """

    t: object = "t"
    ax: object = "ax"
    ay: object = "ay"
    az: object = "az"
    label: object = "label"
    segment: object = None
    has_header: bool = True
    delimiter: str = ","
    label_encoding: dict = field(default_factory=lambda: {"0": NONFALL, "1": FALL})

    def __post_init__(self):
        accel = [self.ax, self.ay, self.az]
        if any(c is None for c in accel):
            raise DataError("ax, ay and az columns must all be mapped")
        if len(set(accel)) != 3:
            raise DataError(f"ax/ay/az columns must be distinct, got {accel}")
        for token, value in self.label_encoding.items():
            if value not in (NONFALL, FALL):
                raise DataError(f"label encoding for {token!r} must map to 0 or 1, got {value!r}")

    def to_dict(self):
        return {"t": self.t, "ax": self.ax, "ay": self.ay, "az": self.az, "label": self.label,
                "segment": self.segment, "has_header": self.has_header, "delimiter": self.delimiter,
                "label_encoding": dict(self.label_encoding)}


def _resolve_column(spec, header, name):
    if spec is None:
        return None
    if isinstance(spec, int):
        return spec
    if isinstance(spec, str) and spec.isdigit() and (header is None or spec not in header):
        return int(spec)
    if header is None:
        raise DataError(f"column {name}={spec!r} given by name but the schema has no header row")
    try:
        return header.index(spec)
    except ValueError:
        raise DataError(f"column {name}={spec!r} not found in header {header}") from None


def parse_csv(source, schema=None, segment_prefix=None) -> list:
    """Read one recording file (path or text stream) into segments.

    Rows with a blank or whitespace-only line are skipped. Non-numeric
    acceleration cells and unknown label tokens raise :class:`DataError`
    naming the line number.
    """
    schema = schema or CsvSchema()
    if isinstance(source, (str, os.PathLike)):
        prefix = segment_prefix if segment_prefix is not None else Path(source).stem
        with open(source, newline="") as fh:
            return _parse_stream(fh, schema, prefix)
    return _parse_stream(source, schema, segment_prefix or "stream")


_UNSET = object()


def _parse_stream(fh, schema, prefix):
    reader = csv.reader(fh, delimiter=schema.delimiter)
    header = None
    cols = None
    segments = []
    cur_key = _UNSET
    rows_t, rows_acc, rows_lab = [], [], []

    def flush(key):
        if not rows_acc:
            return
        seg_id = prefix if key is None else f"{prefix}:{key}"
        segments.append(Segment(
            seg_id,
            np.array(rows_acc, dtype=np.float64).reshape(-1, 3),
            None if cols["t"] is None else np.array(rows_t, dtype=np.float64),
            None if cols["label"] is None else np.array(rows_lab, dtype=np.int8),
        ))

    for lineno, row in enumerate(reader, start=1):
        if not row or all(not c.strip() for c in row):
            continue
        if cols is None:
            if schema.has_header:
                header = [c.strip() for c in row]
            names = ("t", "ax", "ay", "az", "label", "segment")
            cols = {n: _resolve_column(getattr(schema, n), header, n) for n in names}
            if schema.has_header:
                continue
        try:
            cells = {n: row[i].strip() for n, i in cols.items() if i is not None}
        except IndexError:
            raise DataError(f"line {lineno}: expected at least {max(i for i in cols.values() if i is not None) + 1} "
                            f"columns, got {len(row)}") from None
        acc = []
        for n in ("ax", "ay", "az"):
            try:
                v = float(cells[n])
            except ValueError:
                raise DataError(f"line {lineno}: non-numeric {n} value {cells[n]!r}") from None
            if not math.isfinite(v):
                raise DataError(f"line {lineno}: non-finite {n} value {cells[n]!r}")
            acc.append(v)
        key = cells.get("segment")
        if key != cur_key:
            if cur_key is not _UNSET:
                flush(cur_key)
            rows_t, rows_acc, rows_lab = [], [], []
            cur_key = key
        if cols["t"] is not None:
            try:
                rows_t.append(float(cells["t"]))
            except ValueError:
                raise DataError(f"line {lineno}: non-numeric t value {cells['t']!r}") from None
        if cols["label"] is not None:
            token = cells["label"]
            if token not in schema.label_encoding:
                raise DataError(f"line {lineno}: unknown label token {token!r}")
            rows_lab.append(schema.label_encoding[token])
        rows_acc.append(acc)
    if cur_key is not _UNSET:
        flush(cur_key)
    return segments


def parse_files(paths, schema=None) -> list:
    segments = []
    for p in paths:
        segments.extend(parse_csv(p, schema))
    return segments


def write_csv(path, segments, with_segment_column=False):
    """Write segments in the canonical ``t,ax,ay,az,label`` layout."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        head = ["t", "ax", "ay", "az", "label"] + (["segment"] if with_segment_column else [])
        w.writerow(head)
        for seg in segments:
            for i in range(len(seg)):
                row = [repr(float(seg.t[i])) if seg.t is not None else repr(i * 0.032),
                       repr(float(seg.acc[i, 0])), repr(float(seg.acc[i, 1])), repr(float(seg.acc[i, 2])),
                       str(int(seg.labels[i])) if seg.labels is not None else "0"]
                if with_segment_column:
                    row.append(seg.segment_id)
                w.writerow(row)


# ---------------------------------------------------------------------------
# Windowing, balancing, splitting


def window_starts(n_points, cfg):
    """Start indices 0, stride, ... strictly below ``n_points - window_size``."""
    return np.arange(0, max(0, n_points - cfg.window_size), cfg.stride, dtype=np.int64)


def make_windows(segment: Segment, cfg: WindowConfig = WindowConfig()) -> WindowSet:
    """Slide a window over one segment.

    The last start index is ``N - window_size - 1``, so a segment of N points
    yields ``N - window_size`` windows at stride 1. A window is labeled fall
    when at least ``fall_point_threshold`` of its points are fall points.
    """
    if segment.labels is None:
        raise DataError(f"segment {segment.segment_id!r} has no point labels")
    starts = window_starts(len(segment), cfg)
    if starts.size == 0:
        return WindowSet.empty(cfg.window_size)
    W = cfg.window_size
    views = np.lib.stride_tricks.sliding_window_view(segment.acc, W, axis=0)  # (N-W+1, 3, W)
    values = np.ascontiguousarray(views[starts].transpose(0, 2, 1))
    csum = np.concatenate([[0], np.cumsum(segment.labels == FALL, dtype=np.int64)])
    fall_counts = csum[starts + W] - csum[starts]
    labels = np.where(fall_counts >= cfg.fall_point_threshold, FALL, NONFALL).astype(np.int8)
    return WindowSet(values, labels, [segment.segment_id] * len(starts), starts)


def windows_from_segments(segments, cfg: WindowConfig = WindowConfig()) -> WindowSet:
    return WindowSet.concat([make_windows(s, cfg) for s in segments])


def balance_downsample(ws: WindowSet, rng) -> WindowSet:
    """Keep every minority-class window; draw the same number from the majority without replacement."""
    fall_idx = np.flatnonzero(ws.labels == FALL)
    non_idx = np.flatnonzero(ws.labels == NONFALL)
    if fall_idx.size == 0 or non_idx.size == 0:
        raise DataError(f"cannot balance: class counts are {ws.class_counts()}")
    if non_idx.size >= fall_idx.size:
        keep_non = np.sort(rng.choice(non_idx, size=fall_idx.size, replace=False))
        keep = np.concatenate([fall_idx, keep_non])
    else:
        keep_fall = np.sort(rng.choice(fall_idx, size=non_idx.size, replace=False))
        keep = np.concatenate([keep_fall, non_idx])
    return ws.subset(keep[rng.permutation(keep.size)])


def _round_half_up(x):
    return int(math.floor(x + 0.5))


def split_validation(ws: WindowSet, fraction=0.10, rng=None):
    """Stratified hold-out: returns ``(train, val)`` with ``len(val) == round(fraction * len(ws))``."""
    if not 0 < fraction < 1:
        raise DataError(f"validation fraction must be in (0, 1), got {fraction}")
    n = len(ws)
    n_val = _round_half_up(fraction * n)
    if n < 2 or n_val < 1 or n_val > n - 1:
        raise DataError(f"{n} instances cannot be split with fraction {fraction}")

    by_class = [np.flatnonzero(ws.labels == c) for c in (NONFALL, FALL)]
    sizes = [idx.size for idx in by_class]
    exact = [fraction * s for s in sizes]
    alloc = [int(math.floor(e)) for e in exact]
    # largest remainder, ties broken toward the larger class then class order
    order = sorted(range(2), key=lambda c: (-(exact[c] - alloc[c]), -sizes[c], c))
    for c in order[: n_val - sum(alloc)]:
        alloc[c] += 1
    # keep both classes on both sides when each class has at least two members
    if n_val >= 2 and n - n_val >= 2 and min(sizes) >= 2:
        for c in range(2):
            other = 1 - c
            if alloc[c] == 0 and alloc[other] > 1:
                alloc[c], alloc[other] = 1, alloc[other] - 1
            if alloc[c] == sizes[c] and sizes[other] - alloc[other] > 1:
                alloc[c], alloc[other] = alloc[c] - 1, alloc[other] + 1

    val_parts, train_parts = [], []
    for idx, k in zip(by_class, alloc):
        perm = idx[rng.permutation(idx.size)]
        val_parts.append(perm[:k])
        train_parts.append(perm[k:])
    val_idx = np.concatenate(val_parts)
    train_idx = np.concatenate(train_parts)
    val_idx = val_idx[rng.permutation(val_idx.size)]
    train_idx = train_idx[rng.permutation(train_idx.size)]
    return ws.subset(train_idx), ws.subset(val_idx)


# ---------------------------------------------------------------------------
# Normalization


@dataclass
class NormStats:
    mean: np.ndarray = field(default_factory=lambda: np.zeros(3))
    std: np.ndarray = field(default_factory=lambda: np.ones(3))
    enabled: bool = True

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(3)
        self.std = np.asarray(self.std, dtype=np.float64).reshape(3)
        if self.enabled and np.any(self.std <= 0):
            raise DataError(f"normalization std must be positive, got {self.std}")

    @classmethod
    def identity(cls):
        return cls(np.zeros(3), np.ones(3), enabled=False)

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist(), "enabled": self.enabled}


def compute_norm_stats(ws: WindowSet) -> NormStats:
    """Per-channel mean and population std over every cell of every training window."""
    if len(ws) == 0:
        raise DataError("cannot compute normalization stats on an empty set")
    flat = ws.values.reshape(-1, 3)
    mean = flat.mean(axis=0)
    std = flat.std(axis=0)
    for c in range(3):
        lo, hi = flat[:, c].min(), flat[:, c].max()
        if lo == hi:
            mean[c], std[c] = lo, 1.0
        elif not std[c] > 0:
            std[c] = 1.0
    return NormStats(mean, std, True)


def apply_norm(stats: NormStats, window):
    """Z-score a window (instance or raw ``(..., 3)`` array); identity when disabled."""
    if isinstance(window, WindowInstance):
        return WindowInstance(apply_norm(stats, window.values), window.label, window.source)
    if not stats.enabled:
        return window
    return (np.asarray(window, dtype=np.float64) - stats.mean) / stats.std


# ---------------------------------------------------------------------------
# Prepared-dataset artifact: a directory of .npy arrays plus manifest.json


def save_prepared(directory, splits: dict, manifest: dict):
    """Write each split as ``<name>.values.npy``/``.labels.npy``/``.starts.npy``/``.segments.json``.

    ``manifest.json`` records the format version, per-split class counts and
    a SHA-256 of every file plus whatever config the caller passes in.
    """
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    files = {}
    for name, ws in splits.items():
        for suffix, arr in (("values", ws.values), ("labels", ws.labels), ("starts", ws.starts)):
            fn = f"{name}.{suffix}.npy"
            np.save(d / fn, arr, allow_pickle=False)
            files[fn] = _sha256(d / fn)
        fn = f"{name}.segments.json"
        (d / fn).write_text(json.dumps(ws.segment_ids))
        files[fn] = _sha256(d / fn)
    full = {
        "format_version": PREPARED_FORMAT_VERSION,
        "window_size": next(iter(splits.values())).window_size if splits else None,
        "splits": {name: {"count": len(ws), **ws.class_counts()} for name, ws in splits.items()},
        **manifest,
        "files": files,
    }
    (d / "manifest.json").write_text(json.dumps(full, indent=2, sort_keys=True) + "\n")
    return full


def load_prepared(directory, names=None) -> tuple:
    """Return ``(splits, manifest)``; verifies version and file hashes."""
    d = Path(directory)
    try:
        manifest = json.loads((d / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"cannot read prepared dataset manifest in {d}: {e}") from e
    if manifest.get("format_version") != PREPARED_FORMAT_VERSION:
        raise DataError(f"unsupported prepared dataset version {manifest.get('format_version')!r}")
    for fn, digest in manifest.get("files", {}).items():
        if _sha256(d / fn) != digest:
            raise DataError(f"prepared dataset file {fn} does not match its manifest hash")
    splits = {}
    for name in names or manifest["splits"]:
        if name not in manifest["splits"]:
            raise DataError(f"prepared dataset has no split {name!r}")
        splits[name] = WindowSet(
            np.load(d / f"{name}.values.npy"),
            np.load(d / f"{name}.labels.npy"),
            json.loads((d / f"{name}.segments.json").read_text()),
            np.load(d / f"{name}.starts.npy"),
        )
    return splits, manifest


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()

