"""Small differentiable segmentation net with per-class binary scoring heads.

The extractor is three 3x3 conv blocks with two 2x max-pools (total stride 4).
Each class, background included, owns an independent 1x1 scoring head over the
d-dimensional feature map; heads are appended as steps introduce classes, and
appending never touches existing parameters.
"""

from __future__ import annotations

import copy
import hashlib
import io
import json
import math
import zipfile
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .config import ModelConfig
from .errors import CheckpointError, ContractError

STRIDE = 4

CHECKPOINT_FORMAT_VERSION = 1


def _init_conv(conv: nn.Conv2d, gen: torch.Generator) -> None:
    # Same bounds as torch's default conv init, but drawn from our generator.
    fan_in = conv.weight[0].numel()
    bound = 1.0 / math.sqrt(fan_in)
    with torch.no_grad():
        conv.weight.uniform_(-bound, bound, generator=gen)
        if conv.bias is not None:
            conv.bias.uniform_(-bound, bound, generator=gen)


class SegNet(nn.Module):
    """Feature extractor plus ordered per-class scorers (channel 0 = background)."""

    def __init__(self, model_cfg: ModelConfig, class_ids: Sequence[int],
                 step_of_class: dict[int, int] | None = None,
                 generator: torch.Generator | None = None):
        super().__init__()
        class_ids = list(class_ids)
        if class_ids[0] != 0:
            raise ContractError("class_ids must start with background id 0")
        if len(set(class_ids)) != len(class_ids):
            raise ContractError("class_ids must be unique")
        self.cfg = model_cfg
        self.class_ids = class_ids
        self.step_of_class = dict(step_of_class or {c: 1 for c in class_ids})
        c, d = model_cfg.hidden_channels, model_cfg.feature_dim
        self.extractor = nn.Sequential(
            nn.Conv2d(3, c, 3, padding=1), nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(c, c, 3, padding=1), nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(c, d, 3, padding=1), nn.ReLU(),
        )
        self.scorers = nn.ModuleList(nn.Conv2d(d, 1, 1) for _ in class_ids)
        gen = generator if generator is not None else torch.Generator().manual_seed(0)
        for m in self.extractor:
            if isinstance(m, nn.Conv2d):
                _init_conv(m, gen)
        for s in self.scorers:
            _init_conv(s, gen)
        if model_cfg.freeze_extractor:
            for p in self.extractor.parameters():
                p.requires_grad_(False)

    @property
    def num_channels(self) -> int:
        return len(self.scorers)

    def channel_of(self, class_id: int) -> int:
        return self.class_ids.index(class_id)

    def forward(self, images: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(B,3,H,W) -> features (B,d,h,w), raw logits (B,K,h,w); h=H/4."""
        if images.dim() != 4 or images.shape[1] != 3:
            raise ContractError(f"expected (B,3,H,W) images, got {tuple(images.shape)}")
        if images.shape[2] % STRIDE or images.shape[3] % STRIDE:
            raise ContractError("image height/width must be multiples of 4")
        feats = self.extractor(images)
        logits = torch.cat([s(feats) for s in self.scorers], dim=1)
        return feats, logits

    def expand_head(self, new_classes: Sequence[int], step: int,
                    generator: torch.Generator | None = None) -> None:
        """Append scorers for new classes, initialized near zero so the new
        head starts neutral.  Existing parameters are untouched.

        Warm-starting new heads from the background scorer was tried and
        rejected: the copied head inherits confident positives on the
        majority background pixels, overshoots downward before features
        separate, and new classes then fail to cross the decision boundary
        within a step's epoch budget.
        """
        dup = set(new_classes) & set(self.class_ids)
        if dup:
            raise ContractError(f"classes already present: {sorted(dup)}")
        gen = generator if generator is not None else torch.Generator().manual_seed(0)
        bg = self.scorers[0]
        sigma = self.cfg.head_init_sigma
        for cid in new_classes:
            scorer = nn.Conv2d(self.cfg.feature_dim, 1, 1).to(bg.weight.dtype)
            with torch.no_grad():
                if sigma > 0:
                    scorer.weight.normal_(0.0, sigma, generator=gen)
                    scorer.bias.normal_(0.0, sigma, generator=gen)
                else:
                    scorer.weight.zero_()
                    scorer.bias.zero_()
            self.scorers.append(scorer)
            self.class_ids.append(int(cid))
            self.step_of_class[int(cid)] = step

    def scorer_params(self, channels: Sequence[int]) -> tuple[torch.Tensor, torch.Tensor]:
        """Stack (weight (J,d), bias (J,)) for the given scorer channels."""
        w = torch.cat([self.scorers[j].weight.reshape(1, -1) for j in channels], dim=0)
        b = torch.cat([self.scorers[j].bias for j in channels], dim=0)
        return w, b


def predict(logits: torch.Tensor, class_ids: Sequence[int] | None = None) -> torch.Tensor:
    """Per-position class = argmax over per-class sigmoid scores.

    Sigmoid is monotone, so the argmax is taken on raw logits; ties resolve to
    the lowest channel index, i.e. the lowest class ID under the ascending
    class assignment used throughout.
    """
    channel = logits.argmax(dim=-3)
    if class_ids is None:
        return channel
    lut = torch.as_tensor(list(class_ids), dtype=torch.long, device=logits.device)
    return lut[channel]


def upsample_labels(labels: torch.Tensor, factor: int = STRIDE) -> torch.Tensor:
    """Nearest-neighbor upsampling of a categorical map."""
    return labels.repeat_interleave(factor, dim=-2).repeat_interleave(factor, dim=-1)


def downsample_labels(labels: torch.Tensor, factor: int = STRIDE) -> torch.Tensor:
    """Nearest-neighbor downsampling (top-left sample per cell)."""
    return labels[..., ::factor, ::factor]


def param_hash(module: nn.Module) -> str:
    """Stable digest of all parameters and buffers, in state-dict order."""
    digest = hashlib.sha256()
    for name, tensor in module.state_dict().items():
        digest.update(name.encode())
        arr = tensor.detach().cpu().numpy()
        digest.update(str(arr.dtype).encode())
        digest.update(str(arr.shape).encode())
        digest.update(arr.tobytes())
    return digest.hexdigest()


class ModelSnapshot:
    """Frozen copy of a model at a step boundary; forward never mutates it."""

    def __init__(self, net: SegNet, step: int):
        self.net = copy.deepcopy(net)
        self.net.eval()
        for p in self.net.parameters():
            p.requires_grad_(False)
        self.step = step

    @property
    def class_ids(self) -> list[int]:
        return self.net.class_ids

    @property
    def num_channels(self) -> int:
        return self.net.num_channels

    def forward(self, images: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        with torch.no_grad():
            return self.net(images)

    def param_hash(self) -> str:
        return param_hash(self.net)


def snapshot(model: SegNet, step: int) -> ModelSnapshot:
    return ModelSnapshot(model, step)


def save_checkpoint(model: SegNet, path: str | Path, *, step: int,
                    config: dict | None = None, config_hash: str | None = None) -> None:
    """Write a zip container: header.json plus one .npy per named parameter."""
    header = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "kind": "segnet-checkpoint",
        "step": step,
        "class_ids": model.class_ids,
        "step_of_class": {str(k): v for k, v in model.step_of_class.items()},
        "model": {
            "feature_dim": model.cfg.feature_dim,
            "hidden_channels": model.cfg.hidden_channels,
            "head_init_sigma": model.cfg.head_init_sigma,
            "freeze_extractor": model.cfg.freeze_extractor,
        },
        "config_hash": config_hash,
        "config": config,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        zf.writestr("header.json", json.dumps(header, indent=2, sort_keys=True))
        for name, tensor in model.state_dict().items():
            buf = io.BytesIO()
            np.save(buf, tensor.detach().cpu().numpy())
            zf.writestr(f"params/{name}.npy", buf.getvalue())


def load_checkpoint(path: str | Path) -> tuple[SegNet, dict]:
    """Rebuild the net from a checkpoint container; exact round-trip."""
    path = Path(path)
    try:
        with zipfile.ZipFile(path, "r") as zf:
            header = json.loads(zf.read("header.json"))
            if header.get("kind") != "segnet-checkpoint":
                raise CheckpointError(f"not a model checkpoint: {path}")
            if header.get("format_version") != CHECKPOINT_FORMAT_VERSION:
                raise CheckpointError(
                    f"unsupported checkpoint version in {path}: "
                    f"{header.get('format_version')}"
                )
            cfg = ModelConfig(**header["model"])
            step_of_class = {int(k): v for k, v in header["step_of_class"].items()}
            net = SegNet(cfg, header["class_ids"], step_of_class)
            state = {}
            for name in net.state_dict():
                blob = zf.read(f"params/{name}.npy")
                state[name] = torch.from_numpy(np.load(io.BytesIO(blob)))
            net.load_state_dict(state)
    except (OSError, KeyError, zipfile.BadZipFile, json.JSONDecodeError, ValueError) as exc:
        raise CheckpointError(f"cannot load checkpoint {path}: {exc}") from exc
    return net, header


def load_snapshot(path: str | Path) -> ModelSnapshot:
    net, header = load_checkpoint(path)
    return ModelSnapshot(net, header["step"])
