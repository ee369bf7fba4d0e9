"""Pseudo-label-balanced batch construction.

Every batch slot draws a cluster id uniformly over the c clusters and then
a member clip uniformly within that cluster, both with replacement, so the
marginal probability of any cluster occupying a slot is exactly 1/c no
matter how skewed the cluster sizes are. Without this, a dominant cluster
would let the prediction head win by emitting a constant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .clustering import PseudoLabelAssignment


@dataclass
class BalancedBatchPlan:
    batches: list[np.ndarray]  # epoch_length arrays of batch_size clip indices
    batch_size: int
    epoch_length: int
    seed: int

    def to_jsonable(self) -> dict:
        return {
            "batch_size": self.batch_size,
            "epoch_length": self.epoch_length,
            "seed": self.seed,
            "batches": [b.tolist() for b in self.batches],
        }


def build_epoch(
    assignment: PseudoLabelAssignment, batch_size: int, seed: int
) -> BalancedBatchPlan:
    """Plan ceil(N / batch_size) batches of uniformly-labeled slots.

    Deterministic given (assignment, batch_size, seed); clips may repeat
    within an epoch since small clusters are oversampled.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    labels = assignment.labels
    n = labels.shape[0]
    c = assignment.cluster_sizes.shape[0]
    if np.any(assignment.cluster_sizes == 0):
        raise RuntimeError("balanced sampling requires every cluster to be non-empty")
    members = [np.flatnonzero(labels == j) for j in range(c)]
    epoch_length = math.ceil(n / batch_size)
    rng = np.random.default_rng(seed)
    cluster_draws = rng.integers(0, c, size=(epoch_length, batch_size))
    member_u = rng.random(size=(epoch_length, batch_size))
    sizes = assignment.cluster_sizes[cluster_draws]
    ranks = np.minimum((member_u * sizes).astype(np.int64), sizes - 1)
    offsets = np.concatenate([[0], np.cumsum(assignment.cluster_sizes)])
    flat_members = np.concatenate(members)
    indices = flat_members[offsets[cluster_draws] + ranks]
    return BalancedBatchPlan(
        batches=[indices[i] for i in range(epoch_length)],
        batch_size=batch_size,
        epoch_length=epoch_length,
        seed=seed,
    )
