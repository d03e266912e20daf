"""Random negative subsampling and class-rebalanced Nystrom center selection."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, TypeVar

import numpy as np

from .errors import InputError

T = TypeVar("T")


def as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def subsample_indices(n: int, count: int, seed) -> np.ndarray:
    """Indices of a uniform sample without replacement of size ``min(count, n)``.

    When ``count >= n`` every index is returned in order; otherwise the
    sample comes back in random order so it can be cut into mini-batches.
    """
    if count < 0:
        raise InputError(f"sample size must be >= 0, got {count}")
    if count >= n:
        return np.arange(n)
    return as_rng(seed).permutation(n)[:count]


def subsample_negatives(pool: Sequence[T] | np.ndarray, count: int, seed) -> list[T] | np.ndarray:
    idx = subsample_indices(len(pool), count, seed)
    if isinstance(pool, np.ndarray):
        return pool[idx]
    return [pool[i] for i in idx]


@dataclass(frozen=True, eq=False)
class CenterSelection:
    positive_indices: np.ndarray
    negative_indices: np.ndarray
    requested: int

    @property
    def positive_count(self) -> int:
        return len(self.positive_indices)

    @property
    def negative_count(self) -> int:
        return len(self.negative_indices)

    @property
    def total(self) -> int:
        return self.positive_count + self.negative_count

    @property
    def underfull(self) -> bool:
        return self.total < self.requested


def rebalanced_center_sampling(n_positive: int, n_negative: int, m: int, seed) -> CenterSelection:
    """Pick ``m`` centers with ``min(P, floor(m/2))`` of them positive.

    The remaining ``m - P'`` centers are drawn from the negatives.  If the
    negatives run out, every negative is taken and the shortfall is filled
    with further positives; the selection is flagged ``underfull`` when even
    that is not enough.
    """
    if m < 1:
        raise InputError(f"number of centers must be >= 1, got {m}")
    if n_positive < 0 or n_negative < 0 or n_positive + n_negative < 1:
        raise InputError("center sampling needs a nonempty pool")
    rng = as_rng(seed)
    p_prime = min(n_positive, m // 2)
    need_neg = m - p_prime
    if n_negative >= need_neg:
        neg = rng.permutation(n_negative)[:need_neg]
        n_pos = p_prime
    else:
        neg = np.arange(n_negative)
        n_pos = min(n_positive, p_prime + need_neg - n_negative)
    pos = rng.permutation(n_positive)[:n_pos]
    return CenterSelection(np.sort(pos), np.sort(neg), m)
