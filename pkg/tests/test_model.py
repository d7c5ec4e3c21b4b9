import numpy as np
import pytest
import torch

from conftest import micro_model, random_logits
from incseg.config import ModelConfig
from incseg.errors import CheckpointError, ContractError
from incseg.losses import mbce_loss
from incseg.model import (
    ModelSnapshot,
    SegNet,
    downsample_labels,
    load_checkpoint,
    load_snapshot,
    param_hash,
    predict,
    save_checkpoint,
    snapshot,
    upsample_labels,
)
from oracles import fd_grad, max_rel_err, oracle_predict, oracle_upsample


def test_forward_shapes():
    net = micro_model(class_ids=(0, 1, 2), feature_dim=16, hidden=8,
                      dtype=torch.float32)
    images = torch.rand(2, 3, 32, 32)
    feats, logits = net(images)
    assert feats.shape == (2, 16, 8, 8)
    assert logits.shape == (2, 3, 8, 8)


def test_forward_deterministic_in_eval():
    net = micro_model(dtype=torch.float32)
    net.eval()
    x = torch.rand(1, 3, 16, 16)
    with torch.no_grad():
        _, a = net(x)
        _, b = net(x)
    assert (a == b).all()


def test_forward_shape_contract():
    net = micro_model(dtype=torch.float32)
    with pytest.raises(ContractError):
        net(torch.rand(1, 1, 16, 16))
    with pytest.raises(ContractError):
        net(torch.rand(1, 3, 15, 16))


def test_expand_preserves_old_params_bitwise():
    net = micro_model(class_ids=(0, 1, 2))
    before = {k: v.clone() for k, v in net.state_dict().items()}
    gen = torch.Generator().manual_seed(5)
    net.expand_head([3, 4], step=2, generator=gen)
    assert net.num_channels == 5
    after = net.state_dict()
    for key, tensor in before.items():
        assert torch.equal(tensor, after[key]), key


def test_expand_zero_is_noop_and_duplicate_rejected():
    net = micro_model()
    k = net.num_channels
    net.expand_head([], step=2)
    assert net.num_channels == k
    with pytest.raises(ContractError):
        net.expand_head([1], step=2)


def test_expand_changes_only_new_channels():
    net = micro_model()
    x = torch.rand(1, 3, 8, 8, dtype=torch.float64)
    with torch.no_grad():
        _, before = net(x)
    net.expand_head([3], step=2, generator=torch.Generator().manual_seed(9))
    with torch.no_grad():
        _, after = net(x)
    assert torch.equal(before, after[:, :3])
    assert after.shape[1] == 4


def test_predict_matches_loop_oracle(rng):
    for _ in range(20):
        logits = random_logits(rng, 5, 4, 6)
        got = predict(torch.from_numpy(logits), [0, 1, 2, 3, 4]).numpy()
        want = oracle_predict(logits, [0, 1, 2, 3, 4])
        assert (got == want).all()


def test_predict_constant_channel_and_tie_break():
    logits = torch.zeros(3, 2, 2)
    logits[1] = 4.0
    assert (predict(logits) == 1).all()
    tie = torch.zeros(4, 2, 2)
    tie[2] = 1.0
    tie[3] = 1.0
    assert (predict(tie) == 2).all()  # lowest class id wins the tie


def test_up_down_sampling(rng):
    label = torch.from_numpy(rng.integers(0, 5, (3, 4)))
    up = upsample_labels(label, 4)
    assert (up.numpy() == oracle_upsample(label.numpy(), 4)).all()
    full = torch.from_numpy(rng.integers(0, 5, (16, 16)))
    down = downsample_labels(full, 4)
    assert (down == full[::4, ::4]).all()


def test_parameter_gradients_match_finite_differences():
    # 4x4 micro-config: every parameter of the net, loss = mbce on a fixed
    # random target map.
    torch.manual_seed(0)
    net = micro_model(class_ids=(0, 1, 2), feature_dim=3, hidden=3)
    rng = np.random.default_rng(7)
    images = torch.from_numpy(rng.random((1, 3, 4, 4)))
    target = torch.from_numpy(rng.integers(0, 3, (1, 1, 1)))

    def loss_fn():
        _, logits = net(images)
        return mbce_loss(logits, target, [0, 1, 2])

    loss = loss_fn()
    loss.backward()
    for name, p in net.named_parameters():
        analytic = p.grad.detach().numpy().copy()
        base = p.detach().numpy()

        def f(values, p=p):
            with torch.no_grad():
                old = p.detach().numpy().copy()
                p.copy_(torch.from_numpy(values))
                out = float(loss_fn())
                p.copy_(torch.from_numpy(old))
            return out

        numeric = fd_grad(f, base.copy(), h=1e-6)
        assert max_rel_err(analytic, numeric) <= 1e-4, name


def test_snapshot_isolated_from_training():
    net = micro_model(dtype=torch.float32)
    snap = snapshot(net, step=1)
    h0 = snap.param_hash()
    x = torch.rand(1, 3, 8, 8)
    with torch.no_grad():
        _, want = snap.net(x)
    # mutate the live model
    with torch.no_grad():
        for p in net.parameters():
            p.add_(1.0)
    _, got = snap.forward(x)
    assert torch.equal(got, want)
    assert snap.param_hash() == h0


def test_snapshot_forward_does_not_mutate():
    net = micro_model(dtype=torch.float32)
    snap = snapshot(net, step=1)
    h0 = snap.param_hash()
    for _ in range(3):
        snap.forward(torch.rand(2, 3, 8, 8))
    assert snap.param_hash() == h0


def test_checkpoint_round_trip(tmp_path):
    net = micro_model(class_ids=(0, 1, 2), dtype=torch.float32)
    net.expand_head([3, 4], step=2, generator=torch.Generator().manual_seed(2))
    x = torch.rand(1, 3, 8, 8)
    net.eval()
    with torch.no_grad():
        _, want = net(x)
    path = tmp_path / "m.ckpt"
    save_checkpoint(net, path, step=2, config_hash="abc")
    loaded, header = load_checkpoint(path)
    loaded.eval()
    with torch.no_grad():
        _, got = loaded(x)
    assert torch.equal(got, want)
    assert header["step"] == 2
    assert header["class_ids"] == [0, 1, 2, 3, 4]
    assert param_hash(loaded) == param_hash(net)

    snap = load_snapshot(path)
    assert isinstance(snap, ModelSnapshot)
    assert snap.step == 2
    assert snap.num_channels == 5


def test_checkpoint_corrupt_file_names_path(tmp_path):
    path = tmp_path / "broken.ckpt"
    path.write_bytes(b"not a zip at all")
    with pytest.raises(CheckpointError, match="broken.ckpt"):
        load_checkpoint(path)


def test_snapshot_channel_count_tracks_steps():
    net = micro_model(class_ids=(0, 1, 2), dtype=torch.float32)
    snap1 = snapshot(net, 1)
    net.expand_head([3, 4], step=2)
    snap2 = snapshot(net, 2)
    assert snap1.num_channels == 3
    assert snap2.num_channels == 5


def test_class_ids_must_start_with_background():
    with pytest.raises(ContractError):
        SegNet(ModelConfig(), [1, 2])
