#!/usr/bin/env python3
"""Run the component ablation (baseline, +compensation, +uncertainty loss,
full method) on shared seeds and print the cumulative table."""

import argparse
from pathlib import Path

from incseg.config import TrainConfig
from incseg.train import run_ablation

ROOT = Path(__file__).resolve().parent.parent


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--config", default=str(ROOT / "configs" / "default.json"))
    parser.add_argument("--seeds", type=int, default=5)
    parser.add_argument("--out", default="runs/ablate")
    args = parser.parse_args()

    cfg = TrainConfig.from_json(args.config)
    result = run_ablation(cfg, list(range(args.seeds)), args.out)

    print(f"{'row':<14}{'old':<9}{'new':<9}{'all':<9}")
    for row in result["rows"]:
        mean = row["mean_final"]
        print(f"{row['name']:<14}{mean['miou_old']:<9.4f}"
              f"{mean['miou_new']:<9.4f}{mean['miou_all']:<9.4f}")
    print(f"\nfull results: {args.out}/ablation.json")


if __name__ == "__main__":
    main()
