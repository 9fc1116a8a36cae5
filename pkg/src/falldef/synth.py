"""Synthetic wrist-accelerometer recordings for desk-scale experiments.

Background motion is gravity on a slowly drifting orientation plus
arm-swing oscillation and sensor noise. A fall is a burst of high-magnitude
readings whose points all carry the fall label.
"""

from dataclasses import dataclass

import numpy as np

from .dataset import FALL, NONFALL, Segment
from .numerics import make_rng

SAMPLE_RATE_HZ = 31.25


@dataclass(frozen=True)
class SynthConfig:
    rate_hz: float = SAMPLE_RATE_HZ
    burst_len: int = 40
    burst_magnitude: tuple = (2.5, 4.0)  # g
    swing_amplitude: tuple = (0.05, 0.35)  # g
    swing_freq_hz: tuple = (0.5, 2.5)
    noise_std: float = 0.04


def adl_signal(rng, n, cfg=SynthConfig()):
    """``(n, 3)`` activity-of-daily-living motion, around 1 g in magnitude."""
    t = np.arange(n) / cfg.rate_hz
    # gravity direction drifts through a smooth random walk of angles
    steps = rng.normal(0.0, 0.02, size=(n, 2)).cumsum(axis=0)
    theta = 0.3 + steps[:, 0]
    phi = steps[:, 1]
    grav = np.stack([np.sin(theta) * np.cos(phi), np.sin(theta) * np.sin(phi), -np.cos(theta)], axis=1)
    # piecewise activity: a new swing pattern every 2-6 s
    swing = np.zeros((n, 3))
    i = 0
    while i < n:
        length = int(rng.uniform(2.0, 6.0) * cfg.rate_hz)
        amp = rng.uniform(*cfg.swing_amplitude)
        freq = rng.uniform(*cfg.swing_freq_hz)
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        phase = rng.uniform(0, 2 * np.pi)
        sl = slice(i, min(n, i + length))
        swing[sl] = amp * np.sin(2 * np.pi * freq * t[sl] + phase)[:, None] * axis
        i += length
    return grav + swing + rng.normal(0.0, cfg.noise_std, size=(n, 3))


def burst_signal(rng, cfg=SynthConfig()):
    """``(burst_len, 3)`` impact burst with per-sample magnitude in ``burst_magnitude``."""
    mags = rng.uniform(*cfg.burst_magnitude, size=cfg.burst_len)
    dirs = rng.normal(size=(cfg.burst_len, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return mags[:, None] * dirs


def fall_recording(seed, n_bursts, gap=400, lead=None, segment_id="synthetic", cfg=SynthConfig()):
    """ADL motion with ``n_bursts`` bursts separated by ``gap`` background samples.

    Returns ``(segment, onsets)`` where ``onsets`` are the burst start indices.
    """
    rng = make_rng(seed)
    lead = gap if lead is None else lead
    n = lead + n_bursts * (cfg.burst_len + gap)
    acc = adl_signal(rng, n, cfg)
    labels = np.full(n, NONFALL, dtype=np.int8)
    onsets = []
    for k in range(n_bursts):
        s = lead + k * (cfg.burst_len + gap)
        acc[s:s + cfg.burst_len] = burst_signal(rng, cfg)
        labels[s:s + cfg.burst_len] = FALL
        onsets.append(s)
    t = np.arange(n) / cfg.rate_hz
    return Segment(segment_id, acc, t, labels), onsets


def adl_recording(seed, n, segment_id="adl", cfg=SynthConfig()):
    rng = make_rng(seed)
    acc = adl_signal(rng, n, cfg)
    return Segment(segment_id, acc, np.arange(n) / cfg.rate_hz, np.full(n, NONFALL, dtype=np.int8))


def corpus(seed=0, n_bursts=66, gap=400):
    """Training and test recordings sized for >= 2,000 fall windows in training.

    Each burst contributes 31 fall windows at stride 1, so 66 bursts give 2,046.
    """
    train_seg, _ = fall_recording(seed, n_bursts, gap, segment_id="synthetic-train")
    test_seg, _ = fall_recording(seed + 1, max(8, n_bursts // 4), gap, segment_id="synthetic-test")
    return train_seg, test_seg
