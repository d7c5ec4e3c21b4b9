import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_logits
from incseg.errors import ContractError
from incseg.model import predict
from incseg.uncertainty import (
    certainty_scores,
    filtered_prediction,
    pseudo_label,
    uncertainty_mask,
)
from oracles import (
    oracle_certainty,
    oracle_filtered_prediction,
    oracle_pseudo_label,
    sigmoid,
)


def test_certainty_tied_top2_is_zero():
    logits = torch.tensor([2.0, 2.0, -1.0]).view(3, 1, 1)
    cm = certainty_scores(logits)
    assert cm.phi.item() == 0.0
    assert cm.u.item() == 1.0


def test_certainty_saturated_pair():
    logits = torch.tensor([10.0, -10.0], dtype=torch.float64).view(2, 1, 1)
    cm = certainty_scores(logits)
    expected = sigmoid(10.0) - sigmoid(-10.0)
    assert abs(cm.phi.item() - expected) < 1e-12
    assert cm.phi.item() > 0.9999


def test_certainty_matches_full_sort_oracle(rng):
    for _ in range(30):
        logits = random_logits(rng, 5, 4, 4)
        got = certainty_scores(torch.from_numpy(logits)).phi.numpy()
        want = oracle_certainty(logits)
        assert np.abs(got - want).max() < 1e-12


def test_certainty_needs_two_channels():
    with pytest.raises(ContractError):
        certainty_scores(torch.zeros(1, 2, 2))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_certainty_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    logits = rng.normal(0, 3, (5, 3, 3))
    perm = rng.permutation(5)
    a = certainty_scores(torch.from_numpy(logits)).phi
    b = certainty_scores(torch.from_numpy(logits[perm])).phi
    assert torch.allclose(a, b, atol=1e-12)
    assert (a >= 0).all() and (a <= 1).all()


def test_filtered_prediction_foreground_gt_blocks_everything(rng):
    logits = torch.from_numpy(random_logits(rng, 4, 3, 3))
    phi = certainty_scores(logits).phi
    gt = torch.ones(3, 3, dtype=torch.long)  # no background anywhere
    out = filtered_prediction(logits, phi, gt, 0.0, [1, 2, 3])
    assert (out == 0).all()


def test_filtered_prediction_threshold_and_retention():
    # One strong old-class channel on a background position.
    logits = torch.full((3, 1, 1), -8.0)
    logits[1] = 8.0
    phi = certainty_scores(logits).phi
    gt = torch.zeros(1, 1, dtype=torch.long)
    keep = filtered_prediction(logits, phi, gt, 0.7, [1])
    assert keep.item() == 1
    # raising tau above phi drops it
    drop = filtered_prediction(logits, phi, gt, 1.0, [1])
    assert drop.item() == 0


def test_filtered_prediction_respects_allowed_classes(rng):
    for _ in range(20):
        logits = random_logits(rng, 5, 4, 4)
        gt = rng.integers(0, 3, (4, 4))
        lt = torch.from_numpy(logits)
        phi = certainty_scores(lt).phi
        got = filtered_prediction(lt, phi, torch.from_numpy(gt), 0.3, [1, 2]).numpy()
        want = oracle_filtered_prediction(logits, gt, 0.3, {1, 2}, list(range(5)))
        assert (got == want).all()
        # subset relation: nonzero implies background gt
        assert (gt[got > 0] == 0).all()


def test_uncertainty_mask_clauses():
    gt = torch.tensor([[3, 0], [3, 1]])
    pred = torch.tensor([[3, 3], [1, 1]])
    smax = torch.tensor([[0.5, 0.95], [0.5, 0.5]])
    m = uncertainty_mask(gt, pred, smax, 0.7, new_classes=[3, 4])
    # (0,0): correct new prediction -> 0; (0,1): confident -> 0
    # (1,0): wrong, unconfident -> 1; (1,1): correct but old class -> 1
    assert m.tolist() == [[0.0, 0.0], [1.0, 1.0]]


def test_pseudo_label_identity_without_previous_model():
    label = torch.tensor([[0, 2], [1, 0]])
    assert pseudo_label(label, None, 0.7, [1, 2]) is label


def test_pseudo_label_unconfident_is_identity(rng):
    label = torch.zeros(3, 3, dtype=torch.long)
    logits = torch.zeros(3, 3, 3, dtype=torch.float64)  # phi = 0 everywhere
    out = pseudo_label(label, logits, 0.7, [1, 2])
    assert (out == label).all()


def test_pseudo_label_matches_loop_oracle(rng):
    for _ in range(20):
        logits = random_logits(rng, 4, 5, 5, scale=4.0)
        label = rng.integers(0, 4, (5, 5))
        got = pseudo_label(torch.from_numpy(label), torch.from_numpy(logits),
                           0.6, [1, 2], [0, 1, 2, 3]).numpy()
        want = oracle_pseudo_label(label, logits, 0.6, {1, 2}, [0, 1, 2, 3])
        assert (got == want).all()


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_pseudo_label_never_overwrites_foreground(seed):
    rng = np.random.default_rng(seed)
    logits = torch.from_numpy(rng.normal(0, 5, (4, 4, 4)))
    label = torch.from_numpy(rng.integers(0, 4, (4, 4)))
    out = pseudo_label(label, logits, 0.3, [1, 2], [0, 1, 2, 3])
    fg = label != 0
    assert (out[fg] == label[fg]).all()
    # filled values are old classes only
    filled = (label == 0) & (out != 0)
    assert set(out[filled].tolist()) <= {1, 2}
