"""Incremental training loop, experiment driver, and sweep runners.

A run walks the schedule step by step: expand the head for the step's
classes, train with whichever components the method enables, refresh the
drift compensation at epoch boundaries, then finalize per-class statistics
into the prototype store and evaluate on the union of eval pools seen so far.
Every artifact needed to resume at a step boundary is persisted per step.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .compensation import CompensationReport, run_adc
from .config import (
    STREAM_BATCH,
    STREAM_INIT,
    STREAM_REPLAY,
    ComponentFlags,
    TrainConfig,
    component_flags,
    rng_stream,
    torch_seed_for,
)
from .data import StepSample, build_schedule, build_step_pools, eval_union
from .errors import TrainingDivergedError
from .losses import (
    LossBundle,
    batch_centers,
    cpd_loss,
    kd_loss,
    mbce_loss,
    misclassified_centers,
    uac_loss,
    weighted_total,
)
from .metrics import StepMetrics, evaluate
from .model import (
    ModelSnapshot,
    SegNet,
    downsample_labels,
    load_checkpoint,
    predict,
    save_checkpoint,
)
from .prototypes import ClassStatsAccumulator, PrototypeStore, sample_replay
from .uncertainty import pseudo_label

REPORT_SCHEMA_VERSION = 1


class JsonlLogger:
    """Append-only JSON-lines event log."""

    def __init__(self, path: Path, append: bool = False):
        path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(path, "a" if append else "w")

    def write(self, event: dict) -> None:
        self._fh.write(json.dumps(event, sort_keys=True) + "\n")

    def close(self) -> None:
        self._fh.flush()
        self._fh.close()


@dataclass
class PoolTensors:
    images: torch.Tensor     # (N,3,H,W) float32
    labels_ds: torch.Tensor  # (N,h,w) long, step-visible classes only


def pool_tensors(pool: Sequence[StepSample]) -> PoolTensors:
    images = torch.from_numpy(np.stack([s.image for s in pool]).transpose(0, 3, 1, 2))
    labels = torch.from_numpy(np.stack([s.label for s in pool]))
    return PoolTensors(images=images, labels_ds=downsample_labels(labels))


def _step_flags(flags: ComponentFlags, t: int) -> ComponentFlags:
    """Components that need a previous model switch on from step 2."""
    later = t >= 2
    return ComponentFlags(
        replay=flags.replay and later,
        kd=flags.kd and later,
        pseudo_label=flags.pseudo_label and later,
        adc=flags.adc and later,
        uac=flags.uac,
        cpd=flags.cpd,
    )


def _replay_arrays(store: PrototypeStore, report: CompensationReport | None,
                   use_compensated: bool, count: int,
                   rng: np.random.Generator) -> tuple[np.ndarray, list[int]]:
    """Sample `count` features per stored class; compensated direction (with
    the raw mean's magnitude) when a compensation report is active."""
    feats = []
    row_classes: list[int] = []
    for c in store.classes():
        rec = store.get(c)
        mean = rec.mean
        if use_compensated and report is not None and c in report.per_class:
            cc = report.per_class[c]
            if cc.observed_pixels > 0:
                mean = float(np.linalg.norm(rec.mean)) * cc.compensated_unit
        feats.append(sample_replay(mean, rec.var, count, rng))
        row_classes.extend([c] * count)
    return np.concatenate(feats, axis=0), row_classes


def _cpd_protos(store: PrototypeStore, report: CompensationReport | None,
                use_compensated: bool) -> dict[int, np.ndarray]:
    out = {}
    for c in store.classes():
        rec = store.get(c)
        if use_compensated and report is not None and c in report.per_class:
            out[c] = report.per_class[c].compensated_unit
        else:
            out[c] = rec.proto
    return out


def train_step(t: int, model: SegNet, prev: ModelSnapshot | None,
               store: PrototypeStore, pool: Sequence[StepSample],
               cfg: TrainConfig, log: JsonlLogger) -> list[CompensationReport]:
    """Run all epochs of one incremental step in place on `model`.

    Returns the compensation reports produced at epoch boundaries (empty when
    compensation is off or this is the initial step).
    """
    flags = _step_flags(component_flags(cfg), t)
    schedule = build_schedule(cfg.data.num_classes, cfg.data.init_count,
                              cfg.data.inc_count, cfg.data.setting)
    new_classes = schedule.classes_for(t)
    old_classes = schedule.old_classes(t)

    log.write({
        "event": "step_start", "step": t, "classes": list(new_classes),
        "components": flags.to_dict(),
    })

    tensors = pool_tensors(pool)
    n = tensors.images.shape[0]
    lr = cfg.lr_init if t == 1 else cfg.lr_inc
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.SGD(params, lr=lr, momentum=cfg.momentum)

    batch_rng = rng_stream(cfg.seed, STREAM_BATCH, t)
    replay_rng = rng_stream(cfg.seed, STREAM_REPLAY, t)

    new_channels = [model.channel_of(c) for c in new_classes]
    old_channel_count = 1 + len(old_classes)

    reports: list[CompensationReport] = []
    latest: CompensationReport | None = None

    model.train()
    for epoch in range(1, cfg.epochs_per_step + 1):
        order = batch_rng.permutation(n)
        for it, start in enumerate(range(0, n, cfg.batch_size)):
            idx = torch.from_numpy(order[start:start + cfg.batch_size])
            images = tensors.images[idx]
            labels = tensors.labels_ds[idx]

            feats, logits = model(images)
            prev_logits = None
            if flags.kd or flags.pseudo_label:
                _, prev_logits = prev.forward(images)

            target = labels
            if flags.pseudo_label:
                target = pseudo_label(labels, prev_logits, cfg.tau, old_classes,
                                      prev.class_ids)

            replay_args = {}
            if flags.replay and len(store):
                replay_feats, row_classes = _replay_arrays(
                    store, latest, flags.adc, cfg.replay_count, replay_rng
                )
                channels = [0] + list(new_channels)
                targets = torch.zeros((len(row_classes), len(channels)))
                targets[:, 0] = 1.0
                if cfg.replay_positive_old:
                    for c in store.classes():
                        channels.append(model.channel_of(c))
                    w_extra = torch.zeros((len(row_classes), len(store)))
                    for j, c in enumerate(store.classes()):
                        w_extra[:, j] = torch.as_tensor(
                            [1.0 if rc == c else 0.0 for rc in row_classes]
                        )
                    targets = torch.cat([targets, w_extra], dim=1)
                weights, bias = model.scorer_params(channels)
                replay_args = dict(
                    replay_features=torch.from_numpy(replay_feats).to(feats.dtype),
                    replay_weights=weights,
                    replay_bias=bias,
                    replay_targets=targets,
                )

            l_mbce = mbce_loss(logits, target, model.class_ids, **replay_args)

            zero = logits.new_zeros(())
            l_kd = zero
            if flags.kd:
                # Distill the old-class channels only.  Including the
                # background channel pins its confident claim on pixels that
                # belong to this step's classes and blocks their acquisition;
                # true-background stability is already supervised directly.
                l_kd = kd_loss(logits[:, 1:old_channel_count], prev_logits[:, 1:])

            # Constraint losses join once the step's predictions have had a
            # few epochs to stabilize; engaging them from the first iteration
            # can pin a not-yet-acquired class to its initial wrong argmax.
            constraints_on = epoch >= cfg.warm_epochs
            l_uac = zero
            l_cpd = zero
            if (flags.uac or flags.cpd) and constraints_on:
                pred = predict(logits, model.class_ids)
            if flags.uac and constraints_on:
                l_uac = uac_loss(logits, labels, pred, cfg.tau, new_classes)
            if flags.cpd and constraints_on:
                centers = batch_centers(feats, labels, new_classes)
                mis = misclassified_centers(feats, labels, pred, new_classes)
                protos = _cpd_protos(store, latest, flags.adc) if len(store) else {}
                denom = len(new_classes) if not cfg.cpd_average_over_present else None
                l_cpd = cpd_loss(centers, mis, protos, cfg.epsilon,
                                 class_count=denom, like=feats)

            total = weighted_total(l_mbce, l_kd, l_uac, l_cpd,
                                   cfg.alpha, cfg.beta, cfg.gamma)
            if not math.isfinite(total.item()):
                raise TrainingDivergedError(
                    f"non-finite loss at step {t} epoch {epoch} iter {it}"
                )
            opt.zero_grad()
            total.backward()
            opt.step()

            bundle = LossBundle.from_terms(
                l_mbce.item(), l_kd.item() if flags.kd else 0.0,
                l_uac.item() if flags.uac else 0.0,
                l_cpd.item() if flags.cpd else 0.0,
                cfg.alpha, cfg.beta, cfg.gamma,
            )
            log.write({"event": "loss", "step": t, "epoch": epoch, "iter": it,
                       **bundle.to_json_dict()})

        if flags.adc and epoch >= cfg.warm_epochs and len(store):
            report = run_adc(prev, model, pool, store, cfg.tau,
                             batch_size=cfg.batch_size, epoch=epoch,
                             renormalize=cfg.renormalize_compensated)
            reports.append(report)
            latest = report
            log.write({"event": "adc", **report.to_json_dict()})

    return reports


def _collect_stats(model: SegNet, pool: Sequence[StepSample],
                   class_ids: Sequence[int], batch_size: int):
    """End-of-step per-class feature moments, model in eval mode."""
    acc = ClassStatsAccumulator(class_ids, model.cfg.feature_dim)
    tensors = pool_tensors(pool)
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            for start in range(0, tensors.images.shape[0], batch_size):
                feats, _ = model(tensors.images[start:start + batch_size])
                acc.update(feats, tensors.labels_ds[start:start + batch_size])
    finally:
        model.train(was_training)
    return acc.finalize()


def _step_dir(out_dir: Path, t: int) -> Path:
    return out_dir / f"step_{t:02d}"


def _step_complete(step_dir: Path) -> bool:
    return all((step_dir / name).exists()
               for name in ("model.ckpt", "store.pstore", "metrics.json"))


def run_experiment(cfg: TrainConfig, out_dir: str | Path,
                   resume: bool = False, plot: bool = False) -> dict:
    """Execute every step of the schedule and write report.json.

    With resume=True, steps whose artifacts already exist under out_dir are
    loaded instead of retrained; because every RNG stream is keyed by (seed,
    domain, step), the continuation is identical to an uninterrupted run.
    """
    cfg.validate()
    # Pin the CPU thread count so parallel reduction order cannot vary
    # between runs; required for the bit-identical report guarantee.
    torch.set_num_threads(1)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    schedule = build_schedule(cfg.data.num_classes, cfg.data.init_count,
                              cfg.data.inc_count, cfg.data.setting)
    pools = build_step_pools(cfg.data, schedule, cfg.seed)

    log = JsonlLogger(out_dir / "train_log.jsonl", append=resume)
    log.write({"event": "run_start", "method": cfg.method, "seed": cfg.seed,
               "config_hash": cfg.config_hash()})

    model: SegNet | None = None
    snap: ModelSnapshot | None = None
    store = PrototypeStore(replay_count=cfg.replay_count)
    step_metrics: list[StepMetrics] = []

    try:
        for t in range(1, schedule.num_steps + 1):
            step_dir = _step_dir(out_dir, t)
            if resume and _step_complete(step_dir):
                model, _ = load_checkpoint(step_dir / "model.ckpt")
                store = PrototypeStore.load(step_dir / "store.pstore")
                raw = json.loads((step_dir / "metrics.json").read_text())
                step_metrics.append(StepMetrics(
                    step=raw["step"],
                    per_class_iou={int(k): v for k, v in raw["per_class_iou"].items()},
                    miou_old=raw["miou_old"], miou_new=raw["miou_new"],
                    miou_all=raw["miou_all"],
                ))
                snap = ModelSnapshot(model, t)
                log.write({"event": "step_resumed", "step": t})
                continue

            new_classes = schedule.classes_for(t)
            init_gen = torch.Generator().manual_seed(
                torch_seed_for(cfg.seed, STREAM_INIT, t)
            )
            if model is None:
                model = SegNet(cfg.model, [0] + list(new_classes),
                               {c: 1 for c in (0, *new_classes)}, init_gen)
            else:
                model.expand_head(new_classes, t, init_gen)

            try:
                reports = train_step(t, model, snap, store, pools[t].train, cfg, log)
            except TrainingDivergedError:
                save_checkpoint(model, step_dir / "diverged.ckpt", step=t,
                                config=cfg.to_dict(), config_hash=cfg.config_hash())
                raise

            new_stats = _collect_stats(model, pools[t].train,
                                       schedule.classes_for(t), cfg.batch_size)
            final_comp = reports[-1].per_class if reports else None
            store.finalize_step(t, new_stats, final_comp)

            metrics = evaluate(model, eval_union(pools, t), schedule, t,
                               batch_size=cfg.batch_size)
            step_metrics.append(metrics)
            log.write({"event": "step_end", "step": t,
                       "metrics": metrics.to_json_dict()})

            save_checkpoint(model, step_dir / "model.ckpt", step=t,
                            config=cfg.to_dict(), config_hash=cfg.config_hash())
            store.save(step_dir / "store.pstore")
            (step_dir / "metrics.json").write_text(
                json.dumps(metrics.to_json_dict(), indent=2, sort_keys=True) + "\n"
            )
            (step_dir / "adc.json").write_text(json.dumps(
                [r.to_json_dict() for r in reports], indent=2, sort_keys=True
            ) + "\n")

            snap = ModelSnapshot(model, t)
    finally:
        log.close()

    report = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "kind": "experiment-report",
        "method": cfg.method,
        "seed": cfg.seed,
        "config_hash": cfg.config_hash(),
        "config": cfg.to_dict(),
        "schedule": {
            "steps": [sorted(s) for s in schedule.steps],
            "setting": schedule.setting,
        },
        "steps": [m.to_json_dict() for m in step_metrics],
        "final": step_metrics[-1].to_json_dict() if step_metrics else None,
    }
    (out_dir / "report.json").write_text(
        json.dumps(report, indent=2, sort_keys=True) + "\n"
    )
    if plot:
        plot_curves([(cfg.method, report)], out_dir / "curves.png")
    return report


def _run_name(cfg: TrainConfig) -> str:
    return f"{cfg.method}_s{cfg.seed}_{cfg.config_hash()[:8]}"


def _mean_final(reports: list[dict]) -> dict:
    keys = ("miou_old", "miou_new", "miou_all")
    out = {}
    for key in keys:
        vals = [r["final"][key] for r in reports if r["final"][key] is not None]
        out[key] = float(np.mean(vals)) if vals else None
    return out


def run_comparison(cfg: TrainConfig, seeds: Sequence[int], out_dir: str | Path,
                   methods: Sequence[str] = ("finetune", "fixed_replay", "adapter"),
                   plot: bool = False) -> dict:
    """Run each method on identical seeds and corpora; per-seed paired table."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    table: dict[str, dict] = {}
    for method in methods:
        per_seed = []
        for seed in seeds:
            sub = cfg.replace(method=method, seed=seed)
            report = run_experiment(sub, out_dir / _run_name(sub), resume=True)
            per_seed.append(report)
        table[method] = {
            "per_seed": [
                {"seed": r["seed"], "final": r["final"]} for r in per_seed
            ],
            "mean_final": _mean_final(per_seed),
        }
    result = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "kind": "comparison-report",
        "seeds": list(seeds),
        "config": cfg.to_dict(),
        "methods": table,
    }
    (out_dir / "comparison.json").write_text(
        json.dumps(result, indent=2, sort_keys=True) + "\n"
    )
    if plot:
        curves = []
        for method in methods:
            sub = cfg.replace(method=method, seed=seeds[0])
            report = json.loads(
                (out_dir / _run_name(sub) / "report.json").read_text()
            )
            curves.append((method, report))
        plot_curves(curves, out_dir / "curves.png")
    return result


ABLATION_ROWS = (
    ("base", {"method": "fixed_replay"}),
    ("plus_adc", {"method": "adapter", "adc": True, "uac": False, "cpd": False}),
    ("plus_adc_uac", {"method": "adapter", "adc": True, "uac": True, "cpd": False}),
    ("full", {"method": "adapter", "adc": True, "uac": True, "cpd": True}),
)


def run_ablation(cfg: TrainConfig, seeds: Sequence[int],
                 out_dir: str | Path) -> dict:
    """Component sweep: baseline, then cumulative additions up to the full
    method, on identical seeds and corpora."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for name, overrides in ABLATION_ROWS:
        per_seed = []
        for seed in seeds:
            sub = cfg.replace(seed=seed, **overrides)
            report = run_experiment(sub, out_dir / _run_name(sub), resume=True)
            per_seed.append(report)
        rows.append({
            "name": name,
            "overrides": overrides,
            "per_seed": [
                {"seed": r["seed"], "final": r["final"]} for r in per_seed
            ],
            "mean_final": _mean_final(per_seed),
        })
    result = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "kind": "ablation-report",
        "seeds": list(seeds),
        "config": cfg.to_dict(),
        "rows": rows,
    }
    (out_dir / "ablation.json").write_text(
        json.dumps(result, indent=2, sort_keys=True) + "\n"
    )
    return result


def plot_curves(named_reports: list[tuple[str, dict]], path: Path) -> None:
    """Per-step mIoU curves (all classes), one line per report."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    for name, report in named_reports:
        steps = [m["step"] for m in report["steps"]]
        ax.plot(steps, [m["miou_all"] for m in report["steps"]],
                marker="o", label=f"{name} all")
        ax.plot(steps, [m["miou_old"] for m in report["steps"]],
                marker=".", linestyle="--", label=f"{name} old")
    ax.set_xlabel("step")
    ax.set_ylabel("mIoU")
    ax.set_ylim(0, 1)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
