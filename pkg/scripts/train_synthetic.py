"""Train the default DGRU on the synthetic corpus and write model, epoch log and test report.

    python3 scripts/train_synthetic.py --out runs/synthetic [--epochs 50] [--stop-at 0.95]
"""

import argparse
import time
from pathlib import Path

from falldef import dataset as ds
from falldef import dgru, metrics, synth, training
from falldef.numerics import make_rng


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="runs/synthetic")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--hidden", type=int, default=256)
    p.add_argument("--stop-at", type=float, default=None, help="stop once validation accuracy reaches this")
    a = p.parse_args()

    train_seg, test_seg = synth.corpus(seed=a.seed)
    rng = make_rng(a.seed)
    balanced = ds.balance_downsample(ds.windows_from_segments([train_seg]), rng)
    train_set, val_set = ds.split_validation(balanced, 0.10, rng)
    test_set = ds.windows_from_segments([test_seg])
    print(f"train {train_set.class_counts()}, val {val_set.class_counts()}, test {test_set.class_counts()}")

    model = dgru.init_model(a.seed, 3, (a.hidden, a.hidden), window_size=40,
                            norm=ds.compute_norm_stats(train_set))
    start = time.perf_counter()

    def on_epoch(rec, m):
        print(f"epoch {rec.epoch:3d}  train_loss {rec.train_loss:.4f}  val_loss {rec.val_loss:.4f}  "
              f"val_acc {rec.val_accuracy:.4f}  ({time.perf_counter() - start:.0f}s)", flush=True)
        return a.stop_at is not None and rec.val_accuracy >= a.stop_at

    cfg = training.TrainConfig(max_epochs=a.epochs, seed=a.seed)
    best, report = training.train(model, train_set, val_set, cfg, on_epoch=on_epoch)

    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    dgru.save_model(best, out / "model.json", {"best_epoch": report.best_epoch, "seed": a.seed})
    rep = metrics.report(dgru.decide(dgru.predict_proba(best, test_set.values)), test_set.labels)
    metrics.emit_report(rep, report.records, out, {"seed": a.seed, "corpus": "synthetic"})
    print(metrics.format_table(rep), end="")
    print(f"wrote {out}")


if __name__ == "__main__":
    main()
