"""Serve a model and replay a synthetic recording against it in one process.

    python3 scripts/stream_demo.py --model runs/synthetic/model.json [--speedup 4]

Without --model a small model is trained on the spot (takes a few seconds).
"""

import argparse
import logging

from falldef import dataset as ds
from falldef import dgru, edge, synth, training
from falldef.numerics import make_rng


def quick_model(seed=0):
    train_seg, _ = synth.corpus(seed=seed, n_bursts=20)
    rng = make_rng(seed)
    train_set, val_set = ds.split_validation(ds.balance_downsample(ds.windows_from_segments([train_seg]), rng),
                                             0.10, rng)
    model = dgru.init_model(seed, 3, (16, 16), window_size=40, norm=ds.compute_norm_stats(train_set))
    best, _ = training.train(model, train_set, val_set,
                             training.TrainConfig(learning_rate=1e-2, max_epochs=8, seed=seed))
    return best


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--model", default=None)
    p.add_argument("--bursts", type=int, default=3)
    p.add_argument("--speedup", type=float, default=1.0)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--alert-log", default=None)
    a = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(message)s")

    model = dgru.load_model(a.model) if a.model else quick_model()
    seg, onsets = synth.fall_recording(seed=123, n_bursts=a.bursts, segment_id="demo")
    server = edge.FallServer(model, edge.ServeConfig(port=0, alert_threshold=a.threshold, alert_log=a.alert_log))
    server.start_background()
    try:
        print(f"replaying {len(seg)} samples with falls at t = "
              f"{', '.join(f'{o / synth.SAMPLE_RATE_HZ:.1f}s' for o in onsets)}")
        summary = edge.replay([seg], *server.address, speedup=a.speedup)
    finally:
        server.shutdown_all()
    print(summary.format())


if __name__ == "__main__":
    main()
