#!/usr/bin/env python3
"""Run the finetune / fixed_replay / adapter comparison on shared seeds and
print a paired result table."""

import argparse
from pathlib import Path

from incseg.config import TrainConfig
from incseg.train import run_comparison

ROOT = Path(__file__).resolve().parent.parent


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--config", default=str(ROOT / "configs" / "default.json"))
    parser.add_argument("--seeds", type=int, default=5)
    parser.add_argument("--out", default="runs/compare")
    parser.add_argument("--plot", action="store_true")
    args = parser.parse_args()

    cfg = TrainConfig.from_json(args.config)
    result = run_comparison(cfg, list(range(args.seeds)), args.out,
                            plot=args.plot)

    header = f"{'method':<14}" + "".join(f"seed {s:<7}" for s in result["seeds"])
    print(header + "mean")
    for method, entry in result["methods"].items():
        cells = "".join(f"{r['final']['miou_all']:<12.4f}"
                        for r in entry["per_seed"])
        print(f"{method:<14}{cells}{entry['mean_final']['miou_all']:.4f}")
    print(f"\nfull results: {args.out}/comparison.json")


if __name__ == "__main__":
    main()
