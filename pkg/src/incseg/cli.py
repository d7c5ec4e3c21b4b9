"""Command-line entry points: run, evaluate, compare, ablate.

Errors surface as machine-readable JSON on stderr with a nonzero exit code.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import METHODS, TrainConfig
from .data import build_schedule, build_step_pools, eval_union
from .errors import IncsegError
from .metrics import evaluate
from .model import load_checkpoint
from .train import run_ablation, run_comparison, run_experiment


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="incseg",
        description="Class-incremental segmentation experiments on synthetic scenes",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one incremental experiment")
    p_run.add_argument("--config", required=True, help="JSON config file")
    p_run.add_argument("--method", choices=METHODS, help="override config method")
    p_run.add_argument("--seed", type=int, help="override config seed")
    p_run.add_argument("--out", default=None, help="output directory")
    p_run.add_argument("--resume", action="store_true",
                       help="reuse completed step artifacts in --out")
    p_run.add_argument("--plot", action="store_true", help="write curves.png")

    p_eval = sub.add_parser("evaluate", help="evaluate a saved checkpoint")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--out", required=True)

    p_cmp = sub.add_parser("compare", help="paired method comparison over seeds")
    p_cmp.add_argument("--config", required=True)
    p_cmp.add_argument("--seeds", type=int, default=5, help="number of seeds")
    p_cmp.add_argument("--out", default=None)
    p_cmp.add_argument("--plot", action="store_true")

    p_abl = sub.add_parser("ablate", help="component ablation sweep over seeds")
    p_abl.add_argument("--config", required=True)
    p_abl.add_argument("--seeds", type=int, default=5)
    p_abl.add_argument("--out", default=None)

    return parser


def _cmd_run(args) -> int:
    cfg = TrainConfig.from_json(args.config)
    if args.method is not None:
        cfg = cfg.replace(method=args.method)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    out = Path(args.out) if args.out else Path("runs") / f"{cfg.method}_s{cfg.seed}"
    report = run_experiment(cfg, out, resume=args.resume, plot=args.plot)
    print(json.dumps({"out": str(out), "final": report["final"]}, indent=2))
    return 0


def _cmd_evaluate(args) -> int:
    model, header = load_checkpoint(args.checkpoint)
    if header.get("config") is None:
        raise IncsegError("checkpoint carries no config; cannot rebuild eval data")
    cfg = TrainConfig.from_dict(header["config"])
    schedule = build_schedule(cfg.data.num_classes, cfg.data.init_count,
                              cfg.data.inc_count, cfg.data.setting)
    pools = build_step_pools(cfg.data, schedule, cfg.seed)
    t = header["step"]
    metrics = evaluate(model, eval_union(pools, t), schedule, t,
                       batch_size=cfg.batch_size)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    payload = metrics.to_json_dict()
    (out / "metrics.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    print(json.dumps(payload, indent=2))
    return 0


def _cmd_compare(args) -> int:
    cfg = TrainConfig.from_json(args.config)
    out = Path(args.out) if args.out else Path("runs") / "compare"
    result = run_comparison(cfg, list(range(args.seeds)), out, plot=args.plot)
    summary = {m: v["mean_final"] for m, v in result["methods"].items()}
    print(json.dumps({"out": str(out), "mean_final": summary}, indent=2))
    return 0


def _cmd_ablate(args) -> int:
    cfg = TrainConfig.from_json(args.config)
    out = Path(args.out) if args.out else Path("runs") / "ablate"
    result = run_ablation(cfg, list(range(args.seeds)), out)
    summary = {row["name"]: row["mean_final"] for row in result["rows"]}
    print(json.dumps({"out": str(out), "mean_final": summary}, indent=2))
    return 0


_COMMANDS = {
    "run": _cmd_run,
    "evaluate": _cmd_evaluate,
    "compare": _cmd_compare,
    "ablate": _cmd_ablate,
}


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except IncsegError as exc:
        payload = {"error": {"type": type(exc).__name__, "message": str(exc)}}
        print(json.dumps(payload), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
