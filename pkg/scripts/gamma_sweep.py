"""Test accuracy of the reduced model as the spectral residual scale gamma varies.

Usage: python3 scripts/gamma_sweep.py [--gammas 0.1 0.2 ... 0.8] [--snr -6] [--epochs 20] [--seed 0]
"""

from __future__ import annotations

import argparse
import json
from pathlib import Path

from tfdiag.experiments import desk_run


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--gammas", type=float, nargs="+", default=[0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8])
    ap.add_argument("--snr", type=float, default=-6.0)
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", type=Path, default=Path("runs/gamma_sweep.json"))
    args = ap.parse_args()
    rows = []
    for g in args.gammas:
        report, _ = desk_run(args.snr, args.epochs, args.seed, gamma=g)
        rows.append({"gamma": g, "accuracy": report.final_test_accuracy, "j1": report.j1})
        print(f"gamma {g:.2f}: {report.final_test_accuracy:6.2f}%  J1 {report.j1:.4f}")
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(json.dumps(rows, indent=2))


if __name__ == "__main__":
    main()
