"""Full model vs. ablation variants over several seeds on the synthetic set.

Usage: python3 scripts/ablation_sweep.py [--variants none non_farel non_fft non_msa] [--snr -6]
                                         [--epochs 20] [--seeds 0 1 2] [--out runs/ablation.json]
"""

from __future__ import annotations

import argparse
import json
from pathlib import Path

from tfdiag.experiments import ablation_sweep


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--variants", nargs="+", default=["none", "non_farel", "non_fft", "non_msa"])
    ap.add_argument("--snr", type=float, default=-6.0)
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--out", type=Path, default=Path("runs/ablation.json"))
    args = ap.parse_args()
    res = ablation_sweep(args.variants, args.seeds, args.snr, args.epochs, log=print)
    summary = {v: {"per_seed": res.accuracy[v], "mean": res.mean(v)} for v in args.variants}
    for v in args.variants:
        print(f"{v:10s} mean {res.mean(v):6.2f}%")
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(json.dumps({"snr_db": args.snr, "epochs": args.epochs, "seeds": args.seeds,
                                    "variants": summary, "seconds": res.seconds}, indent=2))


if __name__ == "__main__":
    main()
