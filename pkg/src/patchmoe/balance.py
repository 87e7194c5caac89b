"""Auxiliary balancing losses that counteract routing collapse.

All three losses read a batch of gate probability vectors (one row per
routed patch). Conventions:

- importance: squared coefficient of variation of per-expert importance
  (column sums of the probabilities), population variance.
- switch: N * sum_j f_j * P_j, where f_j is the fraction of top-k
  assignment slots naming expert j (a constant, no gradient) and P_j the
  mean gate probability. Equals 1 at the uniform point, N at full collapse.
- entropy: ln N - H(mean probability vector), in [0, ln N]; zero when the
  batch-mean routing distribution is uniform.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .tensor import Tensor, _as_tensor, xlogx


@dataclass
class GateBatch:
    """Gate probabilities [B_p, N] plus the selected ids for each row."""

    probs: Tensor
    assignments: list  # per row, the k selected expert ids

    @property
    def n_experts(self):
        return self.probs.shape[1]


def importance_loss(batch: GateBatch) -> Tensor:
    imp = batch.probs.sum(axis=0)
    mean = imp.mean()
    var = ((imp - mean) ** 2).mean()
    return var / (mean * mean)


def switch_loss(batch: GateBatch) -> Tensor:
    n = batch.n_experts
    counts = np.zeros(n)
    slots = 0
    for ids in batch.assignments:
        for j in ids:
            counts[j] += 1
        slots += len(ids)
    freq = counts / slots  # constant: no gradient through the discrete counts
    pmean = batch.probs.mean(axis=0)
    return (pmean * freq).sum() * float(n)


def entropy_loss(batch: GateBatch) -> Tensor:
    pmean = batch.probs.mean(axis=0)
    neg_entropy = xlogx(pmean).sum()  # -H(pmean)
    return neg_entropy + float(np.log(batch.n_experts))


def total_loss(task_loss, balancing, weight):
    """task_loss + weight * balancing."""
    if weight < 0:
        raise ConfigError("balancing loss weight must be >= 0")
    return _as_tensor(task_loss) + float(weight) * _as_tensor(balancing)


LOSS_FNS = {
    "importance": importance_loss,
    "switch": switch_loss,
    "entropy": entropy_loss,
}
