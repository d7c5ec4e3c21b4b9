import numpy as np
import pytest
import torch

from incseg.config import ModelConfig


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(2)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def micro_model(class_ids=(0, 1, 2), feature_dim=4, hidden=4, seed=0,
                dtype=torch.float64):
    cfg = ModelConfig(feature_dim=feature_dim, hidden_channels=hidden)
    gen = torch.Generator().manual_seed(seed)
    from incseg.model import SegNet
    net = SegNet(cfg, list(class_ids), {c: 1 for c in class_ids}, gen)
    return net.to(dtype)


def random_logits(rng, k, h, w, scale=3.0):
    return rng.normal(0.0, scale, size=(k, h, w))
