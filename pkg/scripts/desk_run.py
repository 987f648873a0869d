"""End-to-end desk run: reduced model on the synthetic four-class set.

Usage: python3 scripts/desk_run.py [--snr -4] [--epochs 50] [--seed 0] [--out runs/desk]
"""

from __future__ import annotations

import argparse
import json
import time
from pathlib import Path

from tfdiag.experiments import desk_run
from tfdiag.model import save_checkpoint


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--snr", type=float, default=-4.0)
    ap.add_argument("--epochs", type=int, default=50)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--ablation", default="none")
    ap.add_argument("--gamma", type=float, default=0.1)
    ap.add_argument("--out", type=Path, default=Path("runs/desk"))
    args = ap.parse_args()
    t0 = time.perf_counter()
    report, model = desk_run(args.snr, args.epochs, args.seed, log=print, ablation=args.ablation, gamma=args.gamma)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "report.json").write_text(report.to_json())
    report.write_curves(args.out / "curves.csv")
    save_checkpoint(args.out / "checkpoint.ckpt", model, {"epoch": args.epochs})
    print(json.dumps({"final_test_accuracy": report.final_test_accuracy, "j1": report.j1, "j2": report.j2,
                      "seconds": round(time.perf_counter() - t0, 1)}))


if __name__ == "__main__":
    main()
