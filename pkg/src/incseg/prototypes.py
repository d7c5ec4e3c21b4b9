"""Per-class feature statistics, prototype storage, and Gaussian feature replay.

After each step the extractor's features over that step's pool are summarized
per class by a unit-norm prototype, raw mean, diagonal variance, feature-norm
statistics, and an accumulated pixel count.  Replay draws synthetic features
from these moments; no raw image or feature is ever retained.
"""

from __future__ import annotations

import io
import json
import math
import warnings
import zipfile
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch

from .errors import CheckpointError, ContractError

STORE_FORMAT_VERSION = 1


@dataclass
class ClassStats:
    """Moments of one class's features over a pool, in float64."""

    class_id: int
    mean: np.ndarray      # (d,)
    var: np.ndarray       # (d,) population variance, >= 0
    proto: np.ndarray     # (d,) mean / ||mean||
    count: int
    norm_mean: float      # mean of per-pixel feature L2 norms
    norm_std: float       # population std of per-pixel norms


class ClassStatsAccumulator:
    """Streaming first/second moments per class; order-independent totals."""

    def __init__(self, class_ids: Sequence[int], dim: int):
        self.class_ids = list(class_ids)
        self.dim = dim
        self._sum = {c: np.zeros(dim) for c in self.class_ids}
        self._sumsq = {c: np.zeros(dim) for c in self.class_ids}
        self._norm_sum = {c: 0.0 for c in self.class_ids}
        self._norm_sumsq = {c: 0.0 for c in self.class_ids}
        self._count = {c: 0 for c in self.class_ids}

    def update(self, features: torch.Tensor, labels: torch.Tensor) -> None:
        """features (B,d,h,w) or (d,h,w); labels (B,h,w) or (h,w) at the same
        spatial resolution."""
        if features.dim() == 3:
            features = features.unsqueeze(0)
            labels = labels.unsqueeze(0)
        feats = features.detach().cpu().numpy().astype(np.float64)
        labs = labels.detach().cpu().numpy()
        flat = np.moveaxis(feats, 1, -1).reshape(-1, self.dim)
        lflat = labs.reshape(-1)
        for c in self.class_ids:
            sel = flat[lflat == c]
            if sel.size == 0:
                continue
            self._sum[c] += sel.sum(axis=0)
            self._sumsq[c] += (sel**2).sum(axis=0)
            norms = np.linalg.norm(sel, axis=1)
            self._norm_sum[c] += norms.sum()
            self._norm_sumsq[c] += (norms**2).sum()
            self._count[c] += sel.shape[0]

    def finalize(self) -> dict[int, ClassStats]:
        """Classes that never appeared are omitted with a warning."""
        out: dict[int, ClassStats] = {}
        for c in self.class_ids:
            n = self._count[c]
            if n == 0:
                warnings.warn(f"class {c}: no pixels observed, stats omitted")
                continue
            mean = self._sum[c] / n
            var = np.maximum(self._sumsq[c] / n - mean**2, 0.0)
            norm = np.linalg.norm(mean)
            proto = mean / norm if norm > 0 else mean.copy()
            nm = self._norm_sum[c] / n
            nv = max(self._norm_sumsq[c] / n - nm**2, 0.0)
            out[c] = ClassStats(
                class_id=c, mean=mean, var=var, proto=proto, count=n,
                norm_mean=float(nm), norm_std=float(math.sqrt(nv)),
            )
        return out


def compute_class_stats(batches: Iterable[tuple[torch.Tensor, torch.Tensor]],
                        class_ids: Sequence[int], dim: int) -> dict[int, ClassStats]:
    """One-shot wrapper over the accumulator for an iterable of
    (features, labels) batches."""
    acc = ClassStatsAccumulator(class_ids, dim)
    for feats, labels in batches:
        acc.update(feats, labels)
    return acc.finalize()


@dataclass
class PrototypeRecord:
    """Stored summary of one class, carried across steps."""

    class_id: int
    proto: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    norm_mean: float
    norm_std: float
    eta: int
    last_step: int

    def validate(self) -> None:
        norm = np.linalg.norm(self.proto)
        if not np.isclose(norm, 1.0, atol=1e-6):
            raise ContractError(f"class {self.class_id}: prototype norm {norm} != 1")
        if (self.var < 0).any():
            raise ContractError(f"class {self.class_id}: negative variance")
        if self.eta < 1:
            raise ContractError(f"class {self.class_id}: eta must be >= 1")


def sample_replay(mean: np.ndarray, var: np.ndarray, count: int,
                  rng: np.random.Generator) -> np.ndarray:
    """Draw `count` features from Normal(mean, diag(var)); deterministic under
    a seeded generator."""
    if count < 1:
        raise ContractError("replay count must be >= 1")
    if (np.asarray(var) < 0).any():
        raise ContractError("negative variance in replay distribution")
    return rng.normal(mean, np.sqrt(var), size=(count, len(mean)))


class PrototypeStore:
    """Map class id -> PrototypeRecord, finalized once per step."""

    def __init__(self, replay_count: int = 32):
        self.replay_count = replay_count
        self.records: dict[int, PrototypeRecord] = {}

    def classes(self) -> list[int]:
        return sorted(self.records)

    def __contains__(self, class_id: int) -> bool:
        return class_id in self.records

    def __len__(self) -> int:
        return len(self.records)

    def get(self, class_id: int) -> PrototypeRecord:
        return self.records[class_id]

    def finalize_step(self, step: int, new_stats: Mapping[int, ClassStats],
                      compensation: Mapping[int, "object"] | None = None) -> None:
        """Insert new-class records and fold compensation into old ones.

        new_stats must cover every new class being finalized.  For old
        classes present in `compensation`, the stored direction is replaced by
        the compensated one (magnitude of the raw mean preserved) and eta
        grows by the pixels observed under the unified masks this step.
        """
        for cid, stats in sorted(new_stats.items()):
            if cid in self.records:
                raise ContractError(f"class {cid} already finalized")
            if stats.count < 1:
                raise ContractError(f"class {cid}: empty statistics")
            self.records[cid] = PrototypeRecord(
                class_id=cid,
                proto=stats.proto.copy(),
                mean=stats.mean.copy(),
                var=stats.var.copy(),
                norm_mean=stats.norm_mean,
                norm_std=stats.norm_std,
                eta=stats.count,
                last_step=step,
            )
        for cid, rec in self.records.items():
            if cid in new_stats:
                continue
            comp = (compensation or {}).get(cid)
            if comp is not None and comp.observed_pixels > 0:
                unit = comp.compensated_unit
                rec.proto = unit.copy()
                rec.mean = float(np.linalg.norm(rec.mean)) * unit
                rec.eta += int(comp.observed_pixels)
            rec.last_step = step

    # -- persistence: zip of JSON index plus per-class tensor blobs ----------

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        index = {
            "format_version": STORE_FORMAT_VERSION,
            "kind": "prototype-store",
            "replay_count": self.replay_count,
            "classes": [
                {
                    "class_id": rec.class_id,
                    "norm_mean": rec.norm_mean,
                    "norm_std": rec.norm_std,
                    "eta": rec.eta,
                    "last_step": rec.last_step,
                }
                for _, rec in sorted(self.records.items())
            ],
        }
        with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
            zf.writestr("index.json", json.dumps(index, indent=2, sort_keys=True))
            for cid, rec in sorted(self.records.items()):
                for name, arr in (("proto", rec.proto), ("mean", rec.mean), ("var", rec.var)):
                    buf = io.BytesIO()
                    np.save(buf, arr)
                    zf.writestr(f"blobs/{cid}_{name}.npy", buf.getvalue())

    @classmethod
    def load(cls, path: str | Path) -> "PrototypeStore":
        path = Path(path)
        try:
            with zipfile.ZipFile(path, "r") as zf:
                index = json.loads(zf.read("index.json"))
                if index.get("kind") != "prototype-store":
                    raise CheckpointError(f"not a prototype store: {path}")
                if index.get("format_version") != STORE_FORMAT_VERSION:
                    raise CheckpointError(
                        f"unsupported store version in {path}: {index.get('format_version')}"
                    )
                store = cls(replay_count=index["replay_count"])
                for entry in index["classes"]:
                    cid = entry["class_id"]
                    blobs = {
                        name: np.load(io.BytesIO(zf.read(f"blobs/{cid}_{name}.npy")))
                        for name in ("proto", "mean", "var")
                    }
                    store.records[cid] = PrototypeRecord(
                        class_id=cid,
                        proto=blobs["proto"],
                        mean=blobs["mean"],
                        var=blobs["var"],
                        norm_mean=entry["norm_mean"],
                        norm_std=entry["norm_std"],
                        eta=entry["eta"],
                        last_step=entry["last_step"],
                    )
        except (OSError, KeyError, zipfile.BadZipFile, json.JSONDecodeError) as exc:
            raise CheckpointError(f"cannot load prototype store {path}: {exc}") from exc
        return store
