"""Synthetic multi-class segmentation scenes and incremental-step relabeling.

Each foreground class is a geometric primitive family with a class-specific
color signature plus Gaussian pixel noise.  Colors are spread across hue
space so a three-layer extractor can separate classes within one step's
epoch budget; forgetting pressure comes from the label protocol itself
(absent classes are relabeled to background), which is severe enough at this
scale without engineered color confusion.
"""

from __future__ import annotations

import colorsys
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import (
    STREAM_EVAL_POOL,
    STREAM_TRAIN_POOL,
    DataConfig,
    rng_stream,
)
from .errors import ConfigError, ContractError, GenerationError


@dataclass(frozen=True)
class TaskSchedule:
    """Partition of class IDs {1..num_classes} into an initial step and
    incremental steps.  Step indices are 1-based; class 0 is background."""

    num_classes: int
    init_count: int
    inc_count: int
    steps: tuple[frozenset[int], ...]
    setting: str

    @property
    def num_steps(self) -> int:
        return len(self.steps)

    def _check_step(self, t: int) -> None:
        if not 1 <= t <= self.num_steps:
            raise ContractError(f"step index {t} outside 1..{self.num_steps}")

    def classes_for(self, t: int) -> tuple[int, ...]:
        self._check_step(t)
        return tuple(sorted(self.steps[t - 1]))

    def classes_through(self, t: int) -> tuple[int, ...]:
        self._check_step(t)
        out: set[int] = set()
        for s in self.steps[:t]:
            out |= s
        return tuple(sorted(out))

    def old_classes(self, t: int) -> tuple[int, ...]:
        self._check_step(t)
        return self.classes_through(t - 1) if t > 1 else ()

    def future_classes(self, t: int) -> tuple[int, ...]:
        self._check_step(t)
        out: set[int] = set()
        for s in self.steps[t:]:
            out |= s
        return tuple(sorted(out))


def build_schedule(num_classes: int, init_count: int, inc_count: int,
                   setting: str = "overlapped") -> TaskSchedule:
    """Assign class IDs 1..num_classes to steps in ascending order."""
    if num_classes < 2:
        raise ConfigError("num_classes must be >= 2")
    if init_count < 1:
        raise ConfigError("init_count must be >= 1")
    if inc_count < 1:
        raise ConfigError("inc_count must be >= 1")
    if init_count >= num_classes:
        raise ConfigError(
            "init_count must leave at least one class for incremental steps"
        )
    if setting not in ("overlapped", "disjoint"):
        raise ConfigError(f"setting must be 'overlapped' or 'disjoint', got {setting!r}")

    ids = list(range(1, num_classes + 1))
    steps = [frozenset(ids[:init_count])]
    i = init_count
    while i < num_classes:
        steps.append(frozenset(ids[i:i + inc_count]))
        i += inc_count
    return TaskSchedule(num_classes, init_count, inc_count, tuple(steps), setting)


@dataclass(frozen=True)
class Scene:
    """A generated image with its complete ground-truth label map."""

    image: np.ndarray   # (H, W, 3) float32 in [0, 1]
    label: np.ndarray   # (H, W) int64, 0 = background
    class_set: frozenset[int]
    seed: int


@dataclass(frozen=True)
class StepSample:
    """A scene as visible at one incremental step: only that step's classes
    stay foreground, everything else is relabeled to background."""

    image: np.ndarray
    label: np.ndarray       # values in {0} | C^t
    full_label: np.ndarray  # original label, held for evaluation only


_BASE_COLORS = {
    1: (0.90, 0.10, 0.10),
    2: (0.10, 0.80, 0.10),
    3: (0.10, 0.20, 0.90),
    4: (0.90, 0.85, 0.10),
    5: (0.85, 0.10, 0.80),
    6: (0.10, 0.80, 0.85),
}
_BACKGROUND_COLOR = (0.15, 0.15, 0.15)


def class_color(class_id: int) -> tuple[float, float, float]:
    if class_id in _BASE_COLORS:
        return _BASE_COLORS[class_id]
    # Deterministic hue-wheel extension for larger class counts.
    hue = (class_id * 0.381966) % 1.0
    return colorsys.hsv_to_rgb(hue, 0.8, 0.8)


def _mask_rectangle(yy, xx, cy, cx, size):
    return (np.abs(yy - cy) <= size) & (np.abs(xx - cx) <= 0.8 * size)


def _mask_disk(yy, xx, cy, cx, size):
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= size**2


def _mask_triangle(yy, xx, cy, cx, size):
    # Upright isoceles: width grows linearly from apex.
    rel = yy - (cy - size)
    return (rel >= 0) & (rel <= 2 * size) & (np.abs(xx - cx) <= 0.6 * rel)


def _mask_ring(yy, xx, cy, cx, size):
    r2 = (yy - cy) ** 2 + (xx - cx) ** 2
    return (r2 <= size**2) & (r2 >= (0.45 * size) ** 2)


def _mask_cross(yy, xx, cy, cx, size):
    arm = max(1.0, 0.45 * size)
    return ((np.abs(yy - cy) <= arm) & (np.abs(xx - cx) <= size)) | (
        (np.abs(xx - cx) <= arm) & (np.abs(yy - cy) <= size)
    )


def _mask_diamond(yy, xx, cy, cx, size):
    return np.abs(yy - cy) + np.abs(xx - cx) <= 1.2 * size


_FAMILIES = (_mask_rectangle, _mask_disk, _mask_triangle, _mask_ring,
             _mask_cross, _mask_diamond)


def shape_mask(class_id: int, height: int, width: int, cy: float, cx: float,
               size: float) -> np.ndarray:
    yy, xx = np.ogrid[:height, :width]
    fam = _FAMILIES[(class_id - 1) % len(_FAMILIES)]
    return fam(yy, xx, cy, cx, size)


def generate_scene(seed: int, cfg: DataConfig) -> Scene:
    """Deterministically synthesize one scene from its seed.

    Bounded retries re-draw shape placement until every chosen class holds a
    pixel share inside [min_share, max_share]; later shapes overwrite earlier
    ones, so crowded draws can starve a class and force a retry.
    """
    rng = np.random.default_rng(seed)
    size = cfg.image_size
    n_cls = int(rng.integers(cfg.min_classes_per_scene, cfg.max_classes_per_scene + 1))
    chosen = rng.choice(np.arange(1, cfg.num_classes + 1), size=n_cls, replace=False)

    label = None
    for _ in range(cfg.placement_retries):
        cand = np.zeros((size, size), dtype=np.int64)
        for cid in chosen:
            share = rng.uniform(0.10, 0.22)
            # Radius-like scale from the target pixel share.
            extent = np.sqrt(share) * size * rng.uniform(0.55, 0.75)
            cy = rng.uniform(0.2 * size, 0.8 * size)
            cx = rng.uniform(0.2 * size, 0.8 * size)
            cand[shape_mask(int(cid), size, size, cy, cx, extent)] = int(cid)
        shares = np.bincount(cand.ravel(), minlength=cfg.num_classes + 1) / cand.size
        ok = all(cfg.min_share <= shares[c] <= cfg.max_share for c in chosen)
        if ok:
            label = cand
            break
    if label is None:
        raise GenerationError(
            f"seed {seed}: no placement satisfied share bounds after "
            f"{cfg.placement_retries} retries"
        )

    image = np.empty((size, size, 3), dtype=np.float64)
    image[:] = _BACKGROUND_COLOR
    for cid in chosen:
        image[label == cid] = class_color(int(cid))
    image += rng.normal(0.0, cfg.noise_sigma, image.shape)
    np.clip(image, 0.0, 1.0, out=image)

    return Scene(
        image=image.astype(np.float32),
        label=label,
        class_set=frozenset(int(c) for c in chosen),
        seed=int(seed),
    )


def is_eligible(scene: Scene, schedule: TaskSchedule, t: int) -> bool:
    """Overlapped: the scene shows at least one step-t class.  Disjoint:
    additionally, no future-step class may appear anywhere in the scene."""
    current = scene.class_set & set(schedule.classes_for(t))
    if not current:
        return False
    if schedule.setting == "disjoint" and scene.class_set & set(schedule.future_classes(t)):
        return False
    return True


def relabel_for_step(scene: Scene, schedule: TaskSchedule, t: int) -> StepSample | None:
    """Project a scene into step t's label space, or None if ineligible."""
    if not is_eligible(scene, schedule, t):
        return None
    keep = np.isin(scene.label, schedule.classes_for(t))
    visible = np.where(keep, scene.label, 0)
    return StepSample(image=scene.image, label=visible, full_label=scene.label)


@dataclass(frozen=True)
class StepPool:
    train: tuple[StepSample, ...]
    eval: tuple[Scene, ...]


def _draw_pool_scenes(rng: np.random.Generator, cfg: DataConfig,
                      schedule: TaskSchedule, t: int, count: int,
                      check_disjoint: bool) -> list[Scene]:
    """Draw `count` eligible scenes; slot i must contain class C^t[i mod |C^t|]
    so every current class is covered evenly."""
    classes = schedule.classes_for(t)
    future = set(schedule.future_classes(t)) if check_disjoint else set()
    scenes: list[Scene] = []
    attempts = 0
    limit = 2000 * count
    while len(scenes) < count:
        want = classes[len(scenes) % len(classes)]
        seed = int(rng.integers(0, 2**31 - 1))
        attempts += 1
        if attempts > limit:
            raise GenerationError(
                f"step {t}: could not assemble a pool of {count} eligible scenes"
            )
        scene = generate_scene(seed, cfg)
        if want not in scene.class_set:
            continue
        if future & scene.class_set:
            continue
        scenes.append(scene)
    return scenes


def build_step_pools(cfg: DataConfig, schedule: TaskSchedule,
                     root_seed: int) -> dict[int, StepPool]:
    """Per-step train/eval pools, deterministic in (cfg, schedule, root_seed).

    Train pools honor the schedule's setting (disjoint excludes scenes with
    future classes).  Eval pools only require current-class presence; their
    scenes keep complete labels and are unioned across steps at evaluation.
    """
    disjoint = schedule.setting == "disjoint"
    pools: dict[int, StepPool] = {}
    for t in range(1, schedule.num_steps + 1):
        train_rng = rng_stream(root_seed, STREAM_TRAIN_POOL, t)
        train_scenes = _draw_pool_scenes(
            train_rng, cfg, schedule, t, cfg.train_scenes_per_step, disjoint
        )
        train = tuple(
            s for s in (relabel_for_step(sc, schedule, t) for sc in train_scenes)
            if s is not None
        )
        assert len(train) == len(train_scenes)  # eligibility held by construction
        eval_rng = rng_stream(root_seed, STREAM_EVAL_POOL, t)
        eval_scenes = tuple(_draw_pool_scenes(
            eval_rng, cfg, schedule, t, cfg.eval_scenes_per_step, False
        ))
        pools[t] = StepPool(train=train, eval=eval_scenes)
    return pools


def eval_union(pools: dict[int, StepPool], t: int) -> list[Scene]:
    """Evaluation set after step t: the union of eval pools for steps 1..t."""
    out: list[Scene] = []
    for s in range(1, t + 1):
        out.extend(pools[s].eval)
    return out


# ---------------------------------------------------------------------------
# Corpus persistence: per-scene tensor files plus a JSON manifest.

MANIFEST_NAME = "manifest.json"


def save_corpus(directory: str | Path, scenes: list[Scene], cfg: DataConfig) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, scene in enumerate(scenes):
        np.savez(directory / f"scene_{i:05d}.npz", image=scene.image, label=scene.label)
        entries.append({
            "id": i,
            "seed": scene.seed,
            "class_set": sorted(scene.class_set),
        })
    manifest = {
        "format_version": 1,
        "data_config": _dataconfig_dict(cfg),
        "scenes": entries,
    }
    (directory / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2) + "\n")


def load_corpus(directory: str | Path) -> list[Scene]:
    directory = Path(directory)
    manifest = json.loads((directory / MANIFEST_NAME).read_text())
    scenes = []
    for entry in manifest["scenes"]:
        blob = np.load(directory / f"scene_{entry['id']:05d}.npz")
        scenes.append(Scene(
            image=blob["image"],
            label=blob["label"],
            class_set=frozenset(entry["class_set"]),
            seed=entry["seed"],
        ))
    return scenes


def regenerate_from_manifest(directory: str | Path) -> list[Scene]:
    """Rebuild every scene from its recorded seed; bit-identical to the saved
    corpus when the manifest's data_config is unchanged."""
    directory = Path(directory)
    manifest = json.loads((directory / MANIFEST_NAME).read_text())
    cfg = DataConfig(**manifest["data_config"])
    return [generate_scene(entry["seed"], cfg) for entry in manifest["scenes"]]


def _dataconfig_dict(cfg: DataConfig) -> dict:
    import dataclasses
    return dataclasses.asdict(cfg)
