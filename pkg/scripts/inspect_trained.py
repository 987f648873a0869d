"""Where does a trained model look?  Filter pass-band vs. the fault resonance,
and attention mass near ground-truth impulses.

Trains the reduced model (or loads --checkpoint), then for each fault class
reports the frequency at which the learned embedding filter gain is largest
and the share of last-block attention that falls within one ringdown of an
impulse onset, compared with the share expected under uniform attention.

Usage: python3 scripts/inspect_trained.py [--checkpoint runs/desk/checkpoint.ckpt] [--snr -4] [--epochs 50]
"""

from __future__ import annotations

import argparse

import numpy as np

from tfdiag.data import PRESETS, make_dataset
from tfdiag.experiments import desk_run
from tfdiag.model import dump_attention, load_checkpoint, shape_chain


def attention_near_impulses(model, dataset, spec, label, fs):
    """(mean attention mass near onsets, uniform-attention baseline) for one class."""
    cfg = model.config
    last = dict(shape_chain(cfg))[f"block{cfg.num_blocks}"][1]
    stride = cfg.input_length / last  # input samples per attention position
    window = spec.ringdown_samples(fs, decades=1.0)
    hits, base = [], []
    for x, lab, onsets in zip(dataset.samples, dataset.labels, dataset.impulses):
        if lab != label or len(onsets) == 0:
            continue
        _, avg = dump_attention(model, x[None, :])
        pos = (np.arange(last) + 0.5) * stride
        near = np.zeros(last, dtype=bool)
        for t in onsets * fs:
            near |= (pos >= t) & (pos < t + max(window, stride))
        hits.append(avg[0][near].sum())
        base.append(near.mean())
    return float(np.mean(hits)), float(np.mean(base))


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--checkpoint")
    ap.add_argument("--snr", type=float, default=-4.0)
    ap.add_argument("--epochs", type=int, default=50)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    if args.checkpoint:
        model = load_checkpoint(args.checkpoint)
    else:
        report, model = desk_run(args.snr, args.epochs, args.seed)
        print(f"trained: test accuracy {report.final_test_accuracy:.2f}%")
    fs = 12000.0
    _, test_set = make_dataset(PRESETS["four-class"], 100, snr_db=args.snr, rng_seed=args.seed)
    gain = model.embed.filter.magnitude().mean(axis=0)
    freqs = np.arange(len(gain)) * fs / model.config.input_length
    print(f"embedding filter: largest mean gain {gain.max():.3f} at {freqs[gain.argmax()]:.0f} Hz, "
          f"smallest {gain.min():.3f} at {freqs[gain.argmin()]:.0f} Hz")
    for label, (name, spec) in enumerate(PRESETS["four-class"].items()):
        band = (freqs > spec.resonance_hz - 300) & (freqs < spec.resonance_hz + 300)
        line = f"{name:11s}"
        if spec.kind != "normal":
            line += f" gain near {spec.resonance_hz:.0f} Hz: {gain[band].mean():.3f} (all-band {gain.mean():.3f})"
            hit, base = attention_near_impulses(model, test_set, spec, label, fs)
            line += f" | attention near impulses {hit:.3f} vs uniform {base:.3f}"
        print(line)


if __name__ == "__main__":
    main()
