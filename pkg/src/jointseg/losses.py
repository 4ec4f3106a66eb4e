"""Training losses: cross-entropy semantics plus a discriminative instance
embedding loss.

The discriminative term is a sum of two hinged penalties over per-instance
mean embeddings: a pull term drawing every embedding to within ``delta_v``
(L1) of its instance mean, and a push term keeping distinct instance means at
least ``2 * delta_d`` apart, normalized over ordered pairs. The total training
loss is the unweighted sum of the cross-entropy and discriminative terms.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import autodiff as ad


@dataclass
class LossConfig:
    delta_v: float = 0.5
    delta_d: float = 1.5

    def __post_init__(self):
        if not (self.delta_d > self.delta_v > 0):
            raise ValueError(f"need delta_d > delta_v > 0, got {self.delta_v}, {self.delta_d}")


@dataclass
class InstanceGrouping:
    """Per-instance member index lists over the annotated points."""

    members: list[np.ndarray]

    def __post_init__(self):
        self.members = [np.asarray(m, dtype=np.int64) for m in self.members]
        for i, m in enumerate(self.members):
            if m.size == 0:
                raise ValueError(f"instance {i} has an empty member list")
        flat = np.concatenate(self.members) if self.members else np.empty(0, np.int64)
        if flat.size != np.unique(flat).size:
            raise ValueError("instance member lists overlap")

    @property
    def num_instances(self) -> int:
        return len(self.members)

    @classmethod
    def from_labels(cls, instance_ids: np.ndarray) -> "InstanceGrouping":
        """Group point indices by instance id; negative ids are unannotated
        and excluded."""
        ids = np.asarray(instance_ids)
        return cls([np.flatnonzero(ids == u) for u in np.unique(ids) if u >= 0])


class DiscriminativeLossTerms(NamedTuple):
    total: ad.Tensor
    pull: ad.Tensor
    push: ad.Tensor


def _hinge_squared_mean(dist: ad.Tensor, margin: float, above: bool) -> ad.Tensor:
    """Mean over rows of a squared hinge on an (N, 1) distance column.

    ``above=True`` penalizes distances above the margin (pull), ``False``
    penalizes the shortfall below it (push, margin - dist).
    """
    gap = ad.add_scalar(dist, -margin) if above else ad.neg(ad.add_scalar(dist, -margin))
    h = ad.relu(gap)
    return ad.reduce_mean(ad.mul(h, h), axis=0)


def discriminative_loss(embeddings: ad.Tensor, grouping: InstanceGrouping,
                        cfg: LossConfig) -> DiscriminativeLossTerms:
    """Pull/push embedding loss over the given instance grouping.

    Pull averages the per-point squared hinge within each instance and then
    over instances; push averages squared hinges over ordered pairs of
    distinct instance means (zero for a single instance). All distances are
    L1.
    """
    if grouping.num_instances < 1:
        raise ValueError("grouping must contain at least one instance")
    m = grouping.num_instances
    dtype = embeddings.dtype

    means: list[ad.Tensor] = []
    pull_terms: list[ad.Tensor] = []
    for idx in grouping.members:
        inst = ad.gather_rows(embeddings, idx)                 # (N_m, K)
        mu = ad.reduce_mean(inst, axis=0)                      # (1, K)
        means.append(mu)
        dist = ad.reduce_sum(ad.absolute(ad.sub(mu, inst)), axis=1)  # (N_m, 1)
        pull_terms.append(_hinge_squared_mean(dist, cfg.delta_v, above=True))

    pull = pull_terms[0]
    for t in pull_terms[1:]:
        pull = ad.add(pull, t)
    pull = ad.mul_scalar(pull, 1.0 / m)

    if m == 1:
        push = ad.Tensor(np.zeros((1, 1), dtype=dtype))
    else:
        # ordered pairs (i, j), i != j; each unordered pair contributes twice
        pair_terms = []
        for i in range(m):
            for j in range(i + 1, m):
                dist = ad.reduce_sum(ad.absolute(ad.sub(means[i], means[j])), axis=1)
                pair_terms.append(_hinge_squared_mean(dist, 2 * cfg.delta_d, above=False))
        push = pair_terms[0]
        for t in pair_terms[1:]:
            push = ad.add(push, t)
        push = ad.mul_scalar(push, 2.0 / (m * (m - 1)))

    return DiscriminativeLossTerms(total=ad.add(pull, push), pull=pull, push=push)


def total_loss(logits: ad.Tensor, semantic_labels: np.ndarray,
               embeddings: ad.Tensor, grouping: InstanceGrouping,
               cfg: LossConfig) -> ad.Tensor:
    """Cross-entropy over all points plus the discriminative embedding loss."""
    ce = ad.softmax_cross_entropy(logits, semantic_labels)
    disc = discriminative_loss(embeddings, grouping, cfg)
    return ad.add(ce, disc.total)
