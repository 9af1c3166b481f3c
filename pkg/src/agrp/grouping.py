"""Random grouping of same-label images into training instances."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DomainError

MAX_GROUP_SIZE = 5


def group_label_accuracy(xi: float, K: int) -> float:
    """Probability that a group of ``K`` images holds at least one correct label.

    Each member is mislabelled independently with probability ``xi``, so
    the group label is wrong only when all of them are: ``1 - xi**K``.

    >>> round(group_label_accuracy(0.2, 3), 12)
    0.992
    """
    if not 0.0 <= xi <= 1.0:
        raise DomainError(f"xi must lie in [0, 1], got {xi}")
    if K < 1:
        raise DomainError(f"K must be a positive integer, got {K}")
    return 1.0 - xi**K


def monte_carlo_group_accuracy(xi: float, K: int, trials: int, seed=0) -> float:
    if trials < 1:
        raise DomainError(f"trials must be >= 1, got {trials}")
    rng = np.random.default_rng(seed)
    correct = rng.random((trials, K)) >= xi
    return float(correct.any(axis=1).mean())


@dataclass(frozen=True)
class GroupedInstance:
    member_ids: tuple[int, ...]
    label: int | None
    delta: int  # +1 for class instances, -1 for negative-pool instances

    @property
    def size(self) -> int:
        return len(self.member_ids)


@dataclass(frozen=True)
class GroupPlan:
    instances: tuple[GroupedInstance, ...]
    seed: object

    def __len__(self):
        return len(self.instances)

    def __iter__(self):
        return iter(self.instances)


def plan_epoch(dataset, K: int, negatives_per_epoch: int = 0, seed=0) -> GroupPlan:
    """Partition each class into disjoint groups of ``K`` and add negative groups.

    Per class the image ids are shuffled and cut into consecutive chunks of
    ``K``; the remainder sits out this epoch.  ``negatives_per_epoch``
    negative instances of ``K`` pool images each are drawn without
    replacement, reshuffling the pool whenever fewer than ``K`` remain.
    All instances are then interleaved in one shuffled order.
    """
    if not 1 <= K <= MAX_GROUP_SIZE:
        raise ConfigurationError(f"group size must lie in [1, {MAX_GROUP_SIZE}], got {K}")
    if negatives_per_epoch < 0:
        raise ConfigurationError(f"negatives_per_epoch must be >= 0, got {negatives_per_epoch}")
    by_class = defaultdict(list)
    for im in dataset.train:
        by_class[im.given_label].append(im.id)
    for c in range(dataset.class_count):
        if len(by_class[c]) < K:
            raise ConfigurationError(f"class {c} has {len(by_class[c])} images, fewer than group size {K}")

    rng = np.random.default_rng(seed)
    instances = []
    for c in range(dataset.class_count):
        ids = np.asarray(by_class[c])[rng.permutation(len(by_class[c]))]
        for start in range(0, len(ids) - K + 1, K):
            instances.append(GroupedInstance(tuple(int(i) for i in ids[start : start + K]), c, +1))

    if negatives_per_epoch > 0:
        pool = len(dataset.negatives)
        if pool < K:
            raise ConfigurationError(f"negative pool has {pool} images, fewer than group size {K}")
        order, pos = rng.permutation(pool), 0
        for _ in range(negatives_per_epoch):
            if pos + K > pool:
                order, pos = rng.permutation(pool), 0
            instances.append(GroupedInstance(tuple(int(i) for i in order[pos : pos + K]), None, -1))
            pos += K

    order = rng.permutation(len(instances))
    return GroupPlan(tuple(instances[i] for i in order), seed)
