"""Command-line entry point: ``falldef {prepare,train,eval,serve,replay,sweep,synth}``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 training divergence,
4 I/O error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import os
import sys
from dataclasses import asdict
from pathlib import Path


from . import dataset as ds
from . import edge, metrics, synth, training
from .dgru import decide, init_model, load_model, model_fingerprint, predict_proba, save_model
from .errors import ConfigError, DataError, FalldefError, ModelFormatError
from .numerics import make_rng

log = logging.getLogger("falldef")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED, EXIT_IO = 0, 1, 2, 3, 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n\n{self.format_usage()}")


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _float_list(text):
    return [float(x) for x in text.split(",") if x]


def _int_list(text):
    return [int(x) for x in text.split(",") if x]


def _speed(text):
    return math.inf if text.lower() in ("inf", "max", "0") else float(text)


def _add_schema_args(p):
    g = p.add_argument_group("CSV schema")
    g.add_argument("--delimiter", default=",")
    g.add_argument("--no-header", action="store_true", help="columns are given as 0-based indices")
    g.add_argument("--columns", default="t,ax,ay,az,label",
                   help="comma-separated column names/indices for t,ax,ay,az,label; '-' marks an absent column")
    g.add_argument("--segment-column", default=None, help="column whose value changes mark new recordings")
    g.add_argument("--label-map", default="0=0,1=1", help="TOKEN=CLASS pairs, e.g. 'Fall=1,ADL=0'")
    g.add_argument("--schema", default=None, help="JSON file with CsvSchema fields (overrides the flags above)")


def _schema_from_args(a):
    if a.schema:
        try:
            return ds.CsvSchema(**json.loads(Path(a.schema).read_text()))
        except (OSError, json.JSONDecodeError, TypeError) as e:
            raise ConfigError(f"--schema: {e}") from None
    cols = a.columns.split(",")
    if len(cols) != 5:
        raise ConfigError(f"--columns needs 5 entries (t,ax,ay,az,label), got {len(cols)}")

    def conv(c):
        if c in ("-", ""):
            return None
        return int(c) if a.no_header and c.isdigit() else c

    t, ax, ay, az, label = (conv(c) for c in cols)
    enc = {}
    for pair in a.label_map.split(","):
        tok, sep, val = pair.rpartition("=")
        if not sep:
            raise ConfigError(f"--label-map entry {pair!r} is not TOKEN=CLASS")
        enc[tok] = int(val)
    seg = a.segment_column
    if seg is not None and a.no_header and seg.isdigit():
        seg = int(seg)
    return ds.CsvSchema(t=t, ax=ax, ay=ay, az=az, label=label, segment=seg, has_header=not a.no_header,
                        delimiter=a.delimiter, label_encoding=enc)


def build_parser():
    p = _Parser(prog="falldef", description="Deep GRU fall detection: data prep, training, evaluation, edge serving.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    pr = sub.add_parser("prepare", help="ingest CSVs, window, balance and split")
    pr.add_argument("--train", nargs="+", required=True, help="training recording files")
    pr.add_argument("--test", nargs="*", default=[], help="test recording files")
    pr.add_argument("--out", required=True)
    pr.add_argument("--seed", type=int, default=0)
    pr.add_argument("--window", type=_positive_int, default=40)
    pr.add_argument("--fall-points", type=_positive_int, default=25)
    pr.add_argument("--stride", type=_positive_int, default=1)
    pr.add_argument("--val-fraction", type=float, default=0.10)
    _add_schema_args(pr)

    tr = sub.add_parser("train", help="train a DGRU on a prepared dataset")
    tr.add_argument("--data", default=None, help="prepared dataset directory")
    tr.add_argument("--out", default=None, help="output directory (default: <data>/run)")
    tr.add_argument("--lr", type=float, default=1e-4)
    tr.add_argument("--batch", type=int, default=128)
    tr.add_argument("--epochs", type=int, default=100)
    tr.add_argument("--patience", type=int, default=10)
    tr.add_argument("--clip", type=float, default=5.0)
    tr.add_argument("--optimizer", choices=("adam", "sgd"), default="adam")
    tr.add_argument("--hidden", type=_positive_int, default=256)
    tr.add_argument("--layers", type=_positive_int, default=2)
    tr.add_argument("--head-dim", type=_positive_int, default=None)
    tr.add_argument("--no-norm", action="store_true", help="feed raw sensor units to the network")
    tr.add_argument("--seed", type=int, default=0)

    ev = sub.add_parser("eval", help="score a model on a prepared split")
    ev.add_argument("--model", default=None, help="model file (env FALLDEF_MODEL)")
    ev.add_argument("--data", required=True)
    ev.add_argument("--split", default="test")
    ev.add_argument("--out", required=True)
    ev.add_argument("--epoch-log", default=None, help="epoch log to copy into the report directory")
    ev.add_argument("--seed", type=int, default=0, help="accepted for uniformity; evaluation is deterministic")

    sv = sub.add_parser("serve", help="run the streaming inference service")
    sv.add_argument("--model", default=None, help="env FALLDEF_MODEL")
    sv.add_argument("--bind", default=None, help="HOST:PORT (env FALLDEF_BIND, default 127.0.0.1:9750)")
    sv.add_argument("--threshold", type=float, default=None, help="alert threshold on p_fall (env FALLDEF_THRESHOLD)")
    sv.add_argument("--cooldown", type=float, default=None, help="seconds of event time (env FALLDEF_COOLDOWN)")
    sv.add_argument("--stride", type=_positive_int, default=None)
    sv.add_argument("--webhook", default=None, help="URL for alert POSTs (env FALLDEF_WEBHOOK)")
    sv.add_argument("--alert-log", default="alerts.jsonl")
    sv.add_argument("--retries", type=int, default=None)
    sv.add_argument("--backoff", type=float, default=None)

    rp = sub.add_parser("replay", help="stream recordings to a running service")
    rp.add_argument("files", nargs="+")
    rp.add_argument("--addr", default="127.0.0.1:9750")
    rp.add_argument("--rate", type=float, default=synth.SAMPLE_RATE_HZ)
    rp.add_argument("--speedup", type=_speed, default=1.0, help="pacing multiplier; 'inf' disables pacing")
    rp.add_argument("--window", type=_positive_int, default=40)
    rp.add_argument("--summary-out", default=None)
    rp.add_argument("--seed", type=int, default=0, help="accepted for uniformity; replay is deterministic")
    _add_schema_args(rp)

    sw = sub.add_parser("sweep", help="grid of training runs, selected by validation loss")
    sw.add_argument("--data", required=True)
    sw.add_argument("--out", required=True)
    sw.add_argument("--lr", type=_float_list, default=[1e-4])
    sw.add_argument("--hidden", type=_int_list, default=[256])
    sw.add_argument("--batch", type=_int_list, default=[128])
    sw.add_argument("--patience", type=_int_list, default=[10])
    sw.add_argument("--epochs", type=int, default=100)
    sw.add_argument("--layers", type=_positive_int, default=2)
    sw.add_argument("--seed", type=int, default=0)

    sy = sub.add_parser("synth", help="write synthetic labeled recordings")
    sy.add_argument("--out", required=True)
    sy.add_argument("--seed", type=int, default=0)
    sy.add_argument("--bursts", type=_positive_int, default=66)
    sy.add_argument("--gap", type=_positive_int, default=400)
    return p


def parse_args(argv):
    parser = build_parser()
    if not argv:
        raise UsageError(parser.format_help())
    a = parser.parse_args(argv)
    if a.command is None:
        raise UsageError(parser.format_help())
    # validate resolved configs up front so bad flags fail before any work
    if a.command == "train":
        a.train_cfg = training.TrainConfig(a.lr, a.batch, a.epochs, a.patience, a.clip, a.seed, a.optimizer)
        if not a.data:
            raise ConfigError("train needs --data")
    elif a.command == "sweep":
        for lr in a.lr:
            training.TrainConfig(learning_rate=lr)
        for b in a.batch:
            training.TrainConfig(batch_size=b)
        for pt in a.patience:
            training.TrainConfig(patience=pt)
        if not a.hidden or min(a.hidden) < 1:
            raise ConfigError("--hidden values must be >= 1")
    elif a.command == "prepare":
        try:
            a.window_cfg = ds.WindowConfig(a.window, a.fall_points, a.stride)
        except DataError as e:
            raise ConfigError(str(e)) from None
        if not 0 < a.val_fraction < 1:
            raise ConfigError(f"--val-fraction must be in (0, 1), got {a.val_fraction}")
        a.csv_schema = _schema_from_args(a)
    elif a.command == "replay":
        a.csv_schema = _schema_from_args(a)
        if not a.rate > 0 or not a.speedup > 0:
            raise ConfigError("--rate and --speedup must be positive")
    elif a.command == "serve":
        bind = edge.parse_bind(a.bind) if a.bind else (None, None)
        a.serve_cfg = edge.config_from_env(
            model_path=a.model, host=bind[0], port=bind[1], alert_threshold=a.threshold, cooldown=a.cooldown,
            stride=a.stride, webhook=a.webhook, alert_log=a.alert_log, retries=a.retries, backoff_base=a.backoff)
        if not a.serve_cfg.model_path:
            raise ConfigError("serve needs --model or FALLDEF_MODEL")
    elif a.command == "eval":
        a.model = a.model or os.environ.get("FALLDEF_MODEL")
        if not a.model:
            raise ConfigError("eval needs --model or FALLDEF_MODEL")
    return a


def _file_digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def cmd_prepare(a):
    rng = make_rng(a.seed)
    train_segs = ds.parse_files(a.train, a.csv_schema)
    test_segs = ds.parse_files(a.test, a.csv_schema)
    wins = ds.windows_from_segments(train_segs, a.window_cfg)
    balanced = ds.balance_downsample(wins, rng)
    train_set, val_set = ds.split_validation(balanced, a.val_fraction, rng)
    splits = {"train": train_set, "val": val_set}
    if a.test:
        splits["test"] = ds.windows_from_segments(test_segs, a.window_cfg)
    manifest = {
        "seed": a.seed,
        "window": asdict(a.window_cfg),
        "val_fraction": a.val_fraction,
        "schema": a.csv_schema.to_dict(),
        "inputs": {"train": [{"path": os.path.basename(p), "sha256": _file_digest(p)} for p in a.train],
                   "test": [{"path": os.path.basename(p), "sha256": _file_digest(p)} for p in a.test]},
        "points": {"train": sum(len(s) for s in train_segs), "test": sum(len(s) for s in test_segs)},
        "windows_before_balance": {"train": len(wins), **{f"train_{k}": v for k, v in wins.class_counts().items()}},
        "balanced": {"count": len(balanced), **balanced.class_counts()},
    }
    full = ds.save_prepared(a.out, splits, manifest)
    print(json.dumps({"balanced": full["balanced"], "splits": full["splits"]}, sort_keys=True))
    return EXIT_OK


def _run_meta(a, extra=None):
    keys = ("lr", "batch", "epochs", "patience", "clip", "optimizer", "hidden", "layers", "head_dim", "no_norm", "seed")
    meta = {k: getattr(a, k) for k in keys if hasattr(a, k)}
    meta.update(extra or {})
    return meta


def cmd_train(a):
    splits, manifest = ds.load_prepared(a.data, ["train", "val"])
    train_set, val_set = splits["train"], splits["val"]
    norm = ds.NormStats.identity() if a.no_norm else ds.compute_norm_stats(train_set)
    model = init_model(a.seed, train_set.values.shape[2], (a.hidden,) * a.layers, a.head_dim,
                       train_set.window_size, norm)
    out = Path(a.out or Path(a.data) / "run")
    out.mkdir(parents=True, exist_ok=True)
    meta = _run_meta(a, {"data_manifest_sha256": _file_digest(Path(a.data) / "manifest.json")})
    try:
        best, report = training.train(model, train_set, val_set, a.train_cfg)
    except training.DivergenceError as e:
        if e.report is not None and e.report.records:
            training.write_epoch_log(out / "epoch_log.csv", e.report.records, meta)
        raise
    meta_model = {**meta, "best_epoch": report.best_epoch, "stopped_epoch": report.stopped_epoch}
    save_model(best, out / "model.json", meta_model)
    training.write_epoch_log(out / "epoch_log.csv", report.records, meta)
    (out / "train_report.json").write_text(json.dumps({"config": meta, **report.to_dict()}, indent=2,
                                                      sort_keys=True) + "\n")
    best_rec = report.records[report.best_epoch - 1]
    print(f"best epoch {report.best_epoch} (stopped at {report.stopped_epoch}, {report.stop_reason}): "
          f"val_loss={best_rec.val_loss:.6f} val_accuracy={best_rec.val_accuracy:.4f}")
    return EXIT_OK


def cmd_eval(a):
    model = load_model(a.model)
    splits, _ = ds.load_prepared(a.data, [a.split])
    ws = splits[a.split]
    probs = predict_proba(model, ws.values)
    rep = metrics.report(decide(probs), ws.labels)
    epoch_log = training.read_epoch_log(a.epoch_log) if a.epoch_log else None
    meta = {"model_sha256": model_fingerprint(model), "split": a.split,
            "data_manifest_sha256": _file_digest(Path(a.data) / "manifest.json")}
    metrics.emit_report(rep, epoch_log, a.out, meta)
    print(metrics.format_table(rep), end="")
    return EXIT_OK


def cmd_serve(a):
    cfg = a.serve_cfg
    model = load_model(cfg.model_path)
    server = edge.FallServer(model, cfg)
    host, port = server.address
    log.info("serving %s on %s:%d (threshold %.3f, cooldown %.1fs)", cfg.model_path, host, port,
             cfg.alert_threshold, cfg.cooldown)
    print(f"listening on {host}:{port}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.shutdown_all()
    return EXIT_OK


def cmd_replay(a):
    host, port = edge.parse_bind(a.addr)
    segs = ds.parse_files(a.files, a.csv_schema)
    summary = edge.replay(segs, host, port, a.rate, a.speedup, window_size=a.window)
    print(summary.format())
    if a.summary_out:
        Path(a.summary_out).write_text(json.dumps(summary.to_dict(), indent=2) + "\n")
    return EXIT_OK


def cmd_sweep(a):
    splits, _ = ds.load_prepared(a.data, ["train", "val"])
    train_set, val_set = splits["train"], splits["val"]
    norm = ds.compute_norm_stats(train_set)
    rows = training.sweep_grid(a.lr, a.hidden, a.batch, a.patience, a.seed)
    base = training.TrainConfig(max_epochs=a.epochs)
    done, best_row, best_model = training.sweep(train_set, val_set, rows, base, a.layers, norm)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    header = "# " + json.dumps(_run_meta(a, {"grid": {"lr": a.lr, "hidden": a.hidden, "batch": a.batch,
                                                        "patience": a.patience}}), sort_keys=True) + "\n"
    (out / "sweep.csv").write_text(header + training.format_sweep_table(done))
    save_model(best_model, out / "best_model.json", {"sweep_row": asdict(best_row)})
    print(f"best row {best_row.index}: lr={best_row.learning_rate} hidden={best_row.hidden_dim} "
          f"batch={best_row.batch_size} patience={best_row.patience} val_loss={best_row.best_val_loss:.6f}")
    return EXIT_OK


def cmd_synth(a):
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    train_seg, _ = synth.fall_recording(a.seed, a.bursts, a.gap, segment_id="train")
    test_seg, _ = synth.fall_recording(a.seed + 1, max(8, a.bursts // 4), a.gap, segment_id="test")
    adl = synth.adl_recording(a.seed + 2, 1500, segment_id="adl")
    ds.write_csv(out / "train.csv", [train_seg])
    ds.write_csv(out / "test.csv", [test_seg])
    ds.write_csv(out / "adl.csv", [adl])
    print(f"wrote {out / 'train.csv'} ({len(train_seg)} points), {out / 'test.csv'} ({len(test_seg)} points), "
          f"{out / 'adl.csv'} ({len(adl)} points)")
    return EXIT_OK


COMMANDS = {"prepare": cmd_prepare, "train": cmd_train, "eval": cmd_eval, "serve": cmd_serve,
            "replay": cmd_replay, "sweep": cmd_sweep, "synth": cmd_synth}


def run(a):
    return COMMANDS[a.command](a)


def main(argv=None):
    argv = sys.argv[1:] if argv is None else argv
    try:
        a = parse_args(argv)
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as e:
        print(f"falldef: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return run(a)
    except ConfigError as e:
        print(f"falldef {a.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except ModelFormatError as e:
        print(f"falldef {a.command}: model error: {e}", file=sys.stderr)
        return EXIT_DATA
    except training.DivergenceError as e:
        print(f"falldef {a.command}: training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except FalldefError as e:
        print(f"falldef {a.command}: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"falldef {a.command}: I/O error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
