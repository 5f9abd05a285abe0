"""Mini-batches mixing labeled and unlabeled images at a fixed ratio."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from lada.errors import ConfigError


@dataclass(frozen=True)
class Batch:
    labeled: list
    unlabeled: list


def batch_split(batch_size: int, unlabeled_ratio: float) -> tuple[int, int]:
    """(n_labeled, n_unlabeled); the unlabeled count is floored."""
    if not 0 < unlabeled_ratio < 1:
        raise ConfigError(f"unlabeled_ratio must be in (0, 1), got {unlabeled_ratio}")
    # tiny epsilon so 0.7 * 10 floors to 7, not 6
    n_unlabeled = math.floor(unlabeled_ratio * batch_size + 1e-9)
    return batch_size - n_unlabeled, n_unlabeled


class PoolStream:
    """Endless draws from one pool: a fresh permutation per pass."""

    def __init__(self, pool: Sequence, rng: np.random.Generator):
        self.pool, self.rng = list(pool), rng
        self.order, self.pos, self.epoch = self.rng.permutation(len(self.pool)), 0, 0

    def take(self, k: int) -> list:
        out = []
        while len(out) < k:
            if self.pos == len(self.order):
                self.order, self.pos = self.rng.permutation(len(self.pool)), 0
                self.epoch += 1
            n = min(k - len(out), len(self.order) - self.pos)
            out.extend(self.pool[i] for i in self.order[self.pos:self.pos + n])
            self.pos += n
        return out


class BatchComposer:
    """Iterator of :class:`Batch`; each pool is reshuffled whenever it is exhausted."""

    def __init__(self, labeled_pool: Sequence, unlabeled_pool: Sequence, batch_size: int,
                 unlabeled_ratio: float, seed: int):
        if not labeled_pool:
            raise ConfigError("labeled pool is empty")
        if not unlabeled_pool:
            raise ConfigError("unlabeled pool is empty")
        self.n_labeled, self.n_unlabeled = batch_split(batch_size, unlabeled_ratio)
        rng = np.random.default_rng(seed)
        self._labeled = PoolStream(labeled_pool, np.random.default_rng(rng.integers(1 << 32)))
        self._unlabeled = PoolStream(unlabeled_pool, np.random.default_rng(rng.integers(1 << 32)))

    def __iter__(self):
        return self

    def __next__(self) -> Batch:
        return Batch(self._labeled.take(self.n_labeled), self._unlabeled.take(self.n_unlabeled))

    def steps_per_epoch(self) -> int:
        """Batches needed to see every unlabeled image once."""
        return math.ceil(len(self._unlabeled.pool) / max(self.n_unlabeled, 1))


def compose_batch(labeled_pool: Sequence, unlabeled_pool: Sequence, batch_size: int,
                  unlabeled_ratio: float, seed: int) -> Batch:
    return next(BatchComposer(labeled_pool, unlabeled_pool, batch_size, unlabeled_ratio, seed))
