import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from trajsim.geo import DomainError
from trajsim.model.encoder import ModelConfig
from trajsim.oracles import DistanceMatrix
from trajsim.train import (
    TrainConfig, TrainingError, contrastive_loss, mine_hard_negatives, select_positive, train,
)
import trajsim.train as train_mod


def test_positive_of_pair():
    assert select_positive(np.array([[0.0, 4.0], [4.0, 0.0]]), 0) == 1
    assert select_positive(np.array([[0.0, 4.0], [4.0, 0.0]]), 1) == 0


def test_positive_unique_minimum():
    row = np.full(10, 5.0)
    row[7] = 1.0
    row[3] = 0.0  # the anchor itself is never picked
    D = np.tile(row, (10, 1))
    assert select_positive(D, 3) == 7


def test_positive_ties_lowest_index():
    row = np.full(8, 3.0)
    row[[2, 5]] = 1.0
    row[0] = 0.0
    assert select_positive(np.tile(row, (8, 1)), 0) == 2


def test_positive_needs_two():
    with pytest.raises(DomainError):
        select_positive(np.zeros((1, 1)), 0)


def test_hard_negative_batch_of_three():
    e = np.eye(3)
    assert mine_hard_negatives(e, 0, 1, 1).tolist() == [2]


def test_duplicate_of_anchor_selected_first(rng):
    e = rng.normal(size=(8, 5))
    e[6] = e[2] * 3.0  # same direction as the anchor
    assert mine_hard_negatives(e, 2, 0, 3)[0] == 6


def test_hard_negatives_match_full_sort(rng):
    e = rng.normal(size=(64, 16))
    n = e / np.linalg.norm(e, axis=1, keepdims=True)
    for i, j, k in [(0, 1, 5), (10, 63, 1), (33, 2, 20)]:
        sims = n @ n[i]
        order = sorted((m for m in range(64) if m not in (i, j)), key=lambda m: (-sims[m], m))
        assert mine_hard_negatives(e, i, j, k).tolist() == order[:k]


def test_hard_negative_batch_too_small():
    with pytest.raises(DomainError):
        mine_hard_negatives(np.eye(3), 0, 1, 2)


def test_loss_cancels_when_scores_equal():
    S = torch.tensor([[1.0, 0.3, 0.3], [0.7, 1.0, 0.7], [0.1, 0.1, 1.0]])
    loss = contrastive_loss(S, [0, 1, 2], [1, 0, 0], [[2], [2], [1]], 0.2)
    assert abs(loss.item()) < 1e-6


def test_loss_direct_substitution():
    S = torch.tensor([[0.0, 1.0, 0.0], [1.0, 0.0, 0.0]])
    loss = contrastive_loss(S, [0, 1], [1, 0], [[2], [2]], 0.2)
    assert loss.item() == pytest.approx(-5.0)


def test_infonce_includes_positive():
    S = torch.tensor([[0.0, 1.0, 0.0]], dtype=torch.float64)
    got = contrastive_loss(S, [0], [1], [[2]], 0.2, infonce=True).item()
    assert got == pytest.approx(-(5.0 - np.log(np.exp(5.0) + 1.0)))
    assert got > 0


def test_loss_empty_negatives():
    with pytest.raises(DomainError):
        contrastive_loss(torch.zeros(2, 2), [0], [1], np.zeros((1, 0), dtype=int), 0.2)


@given(st.integers(0, 2**31 - 1))
def test_loss_gradient_matches_finite_differences(seed):
    g = torch.Generator().manual_seed(seed)
    e = torch.randn(6, 4, generator=g, dtype=torch.float64, requires_grad=True)
    args = ([0, 1, 2], [3, 4, 5], [[1, 4], [0, 5], [3, 1]], 0.2)
    assert torch.autograd.gradcheck(lambda x: contrastive_loss(x @ x.T, *args), (e,), eps=1e-6, atol=1e-6)


@pytest.mark.parametrize("kw", [dict(temperature=0.0), dict(hard_negatives=0), dict(batch_size=3, hard_negatives=2),
                                dict(epochs=-1), dict(learning_rate=0.0)])
def test_train_config_validation(kw):
    with pytest.raises(DomainError):
        TrainConfig(**kw)


@pytest.fixture
def toy(small_items, rng):
    x = rng.normal(size=(len(small_items), 2))
    D = DistanceMatrix("dtw", np.linalg.norm(x[:, None] - x[None], axis=2))
    return small_items, D


def _cfg(**kw):
    return TrainConfig(**{**dict(batch_size=4, learning_rate=1e-3, epochs=2), **kw})


def test_zero_epochs_keeps_initialization(toy, small_tables):
    items, D = toy
    res = train(items, D, *small_tables, _cfg(epochs=0), ModelConfig(d=64))
    assert res.epoch_losses == []
    assert all(torch.equal(res.best_state[k], v) for k, v in res.init_state.items())


def test_same_seed_same_losses(toy, small_tables):
    items, D = toy
    a = train(items, D, *small_tables, _cfg(), ModelConfig(d=64))
    b = train(items, D, *small_tables, _cfg(), ModelConfig(d=64))
    assert a.step_losses == b.step_losses and len(a.step_losses) >= 2
    assert not all(torch.equal(a.best_state[k], v) for k, v in a.init_state.items())


def test_validation_picks_best_epoch(toy, small_tables):
    items, D = toy
    res = train(items, D, *small_tables, _cfg(epochs=3), ModelConfig(d=64), val_items=items, D_val=D)
    assert len(res.val_hr1) == 3
    assert res.val_hr1[res.best_epoch - 1] == max(res.val_hr1)


def test_non_finite_loss_aborts(toy, small_tables, monkeypatch):
    items, D = toy
    real = train_mod.contrastive_loss
    monkeypatch.setattr(train_mod, "contrastive_loss", lambda *a, **k: real(*a, **k) * float("nan"))
    with pytest.raises(TrainingError, match="step 0"):
        train(items, D, *small_tables, _cfg(), ModelConfig(d=64))


def test_size_mismatch(toy, small_tables):
    items, D = toy
    with pytest.raises(DomainError):
        train(items[:-1], D, *small_tables, _cfg(), ModelConfig(d=64))
