"""Train and evaluate on the public Smartwatch / SmartFall recordings when available.

Expects DATA/<name>/train.csv and DATA/<name>/test.csv, plus an optional
DATA/<name>/schema.json holding CsvSchema fields for that dataset's layout.

    python3 scripts/reproduce_public.py DATA --out runs/public
"""

import argparse
import json
import sys
from pathlib import Path

from falldef import dataset as ds
from falldef import dgru, metrics, training
from falldef.numerics import make_rng

PUBLISHED = {"smartwatch": 0.924, "smartfall": 0.964}


def run_one(d, out, seed, max_epochs):
    schema_file = d / "schema.json"
    schema = ds.CsvSchema(**json.loads(schema_file.read_text())) if schema_file.exists() else ds.CsvSchema()
    train_segs = ds.parse_files([d / "train.csv"], schema)
    test_segs = ds.parse_files([d / "test.csv"], schema)
    wins = ds.windows_from_segments(train_segs)
    print(f"{d.name}: {sum(len(s) for s in train_segs)} training points -> {len(wins)} windows {wins.class_counts()}")
    rng = make_rng(seed)
    train_set, val_set = ds.split_validation(ds.balance_downsample(wins, rng), 0.10, rng)
    test_set = ds.windows_from_segments(test_segs)
    model = dgru.init_model(seed, 3, (256, 256), window_size=40, norm=ds.compute_norm_stats(train_set))
    best, report = training.train(model, train_set, val_set, training.TrainConfig(max_epochs=max_epochs, seed=seed))
    rep = metrics.report(dgru.decide(dgru.predict_proba(best, test_set.values)), test_set.labels)
    metrics.emit_report(rep, report.records, out / d.name, {"dataset": d.name, "seed": seed})
    dgru.save_model(best, out / d.name / "model.json")
    print(metrics.format_table(rep), end="")
    return rep.accuracy


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("data")
    p.add_argument("--out", default="runs/public")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=100)
    a = p.parse_args()
    root = Path(a.data)
    found = [n for n in PUBLISHED if (root / n / "train.csv").exists()]
    if not found:
        print(f"no <name>/train.csv under {root}; expected one of {sorted(PUBLISHED)}", file=sys.stderr)
        return 2
    for name in found:
        acc = run_one(root / name, Path(a.out), a.seed, a.epochs)
        delta = 100 * (acc - PUBLISHED[name])
        print(f"{name}: test accuracy {100 * acc:.1f}% vs published {100 * PUBLISHED[name]:.1f}% ({delta:+.1f} pp)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
