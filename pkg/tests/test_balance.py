"""Balancing losses: closed-form anchors, symmetry, and gradients."""

import numpy as np
import pytest

from conftest import finite_diff, rel_err
from patchmoe.balance import (
    GateBatch,
    entropy_loss,
    importance_loss,
    switch_loss,
    total_loss,
)
from patchmoe.errors import ConfigError
from patchmoe.tensor import Tensor


def uniform_batch(rows=8, n=4, k=2):
    probs = Tensor(np.full((rows, n), 1.0 / n), requires_grad=True)
    assignments = [[(r + s) % n for s in range(k)] for r in range(rows)]
    return GateBatch(probs=probs, assignments=assignments)


def collapsed_batch(rows=8, n=4):
    hot = np.zeros((rows, n))
    hot[:, 0] = 1.0
    return GateBatch(probs=Tensor(hot), assignments=[[0]] * rows)


def test_anchors_at_uniform():
    batch = uniform_batch()
    assert abs(importance_loss(batch).item()) < 1e-10
    assert abs(switch_loss(batch).item() - 1.0) < 1e-10
    assert abs(entropy_loss(batch).item()) < 1e-10


def test_anchors_at_collapse():
    n = 4
    batch = collapsed_batch(n=n)
    assert abs(switch_loss(batch).item() - n) < 1e-10
    assert abs(entropy_loss(batch).item() - np.log(n)) < 1e-10
    # CV^2 of (rows, 0, 0, 0): mean rows/4, var = 3 (rows/4)^2 => 3.
    assert abs(importance_loss(batch).item() - 3.0) < 1e-10


def test_importance_direct_evaluation():
    probs = np.array([[0.7, 0.1, 0.2], [0.3, 0.5, 0.2]])
    batch = GateBatch(probs=Tensor(probs), assignments=[[0], [1]])
    imp = probs.sum(axis=0)
    want = imp.var() / imp.mean() ** 2
    assert abs(importance_loss(batch).item() - want) < 1e-12


def test_switch_direct_evaluation():
    probs = np.array([[0.6, 0.3, 0.1], [0.2, 0.5, 0.3]])
    batch = GateBatch(probs=Tensor(probs), assignments=[[0, 1], [1, 2]])
    f = np.array([1, 2, 1]) / 4.0
    want = 3.0 * (f * probs.mean(axis=0)).sum()
    assert abs(switch_loss(batch).item() - want) < 1e-12


def test_entropy_direct_evaluation():
    probs = np.array([[0.7, 0.2, 0.1], [0.3, 0.4, 0.3]])
    batch = GateBatch(probs=Tensor(probs), assignments=[[0], [1]])
    pm = probs.mean(axis=0)
    want = np.log(3) + (pm * np.log(pm)).sum()
    assert abs(entropy_loss(batch).item() - want) < 1e-12
    assert entropy_loss(batch).item() >= 0.0


def test_entropy_two_expert_anchor():
    # mean probabilities (0.75, 0.25) over two experts
    probs = np.array([[0.9, 0.1], [0.6, 0.4]])
    batch = GateBatch(probs=Tensor(probs), assignments=[[0], [0]])
    assert abs(entropy_loss(batch).item() - 0.1308123) < 1e-6


def test_losses_are_permutation_equivariant():
    rng = np.random.default_rng(40)
    raw = rng.random((6, 5))
    probs = raw / raw.sum(axis=1, keepdims=True)
    assignments = [list(np.argsort(-row)[:2]) for row in probs]
    perm = rng.permutation(5)
    batch = GateBatch(Tensor(probs), assignments)
    permuted = GateBatch(
        Tensor(probs[:, perm]),
        [[int(np.where(perm == j)[0][0]) for j in ids] for ids in assignments],
    )
    for fn in (importance_loss, switch_loss, entropy_loss):
        assert abs(fn(batch).item() - fn(permuted).item()) < 1e-12


@pytest.mark.parametrize("fn", [importance_loss, switch_loss, entropy_loss])
def test_loss_gradients_match_finite_differences(fn):
    rng = np.random.default_rng(41)
    raw = rng.random((5, 4)) + 0.1
    probs = Tensor(raw / raw.sum(axis=1, keepdims=True), requires_grad=True)
    assignments = [list(np.argsort(-row)[:2]) for row in probs.data]

    def forward():
        return fn(GateBatch(Tensor(probs.data), assignments)).item()

    fn(GateBatch(probs, assignments)).backward()
    fd = finite_diff(forward, probs.data)
    assert rel_err(probs.grad, fd) < 1e-6


def test_total_loss_combines_and_validates():
    combined = total_loss(Tensor(2.0), Tensor(3.0), 0.5)
    assert combined.item() == 3.5
    with pytest.raises(ConfigError):
        total_loss(Tensor(1.0), Tensor(1.0), -1.0)
