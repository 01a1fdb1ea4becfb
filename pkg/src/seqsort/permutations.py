"""Order classes for shuffled n-tuples.

A permutation and its reversal form one class (sorting forwards or backwards
is equally valid). The class representative is the lexicographically smaller
of the pair and ids follow the sorted order of representatives.
"""

from __future__ import annotations

import itertools
import math
from functools import lru_cache

import numpy as np

MAX_N = 5


def num_classes(n: int) -> int:
    if n < 2:
        raise ValueError(f"tuple length must be >= 2, got {n}")
    return math.factorial(n) // 2


def _check_n(n: int) -> None:
    if not 2 <= n <= MAX_N:
        raise ValueError(f"tuple length must be in [2, {MAX_N}], got {n}")


def canonical(p) -> tuple[int, ...]:
    p = tuple(int(v) for v in p)
    return min(p, p[::-1])


@lru_cache(maxsize=None)
def canonical_table(n: int) -> tuple[tuple[int, ...], ...]:
    """Sorted canonical representatives; index == class id."""
    _check_n(n)
    return tuple(sorted({canonical(p) for p in itertools.permutations(range(n))}))


@lru_cache(maxsize=None)
def _index(n: int) -> dict[tuple[int, ...], int]:
    return {c: i for i, c in enumerate(canonical_table(n))}


def validate(p) -> tuple[int, ...]:
    p = tuple(int(v) for v in p)
    if sorted(p) != list(range(len(p))):
        raise ValueError(f"not a permutation of 0..{len(p) - 1}: {p}")
    return p


def class_of(p) -> int:
    p = validate(p)
    _check_n(len(p))
    return _index(len(p))[canonical(p)]


def decode(class_id: int, n: int) -> tuple[int, ...]:
    table = canonical_table(n)
    if not 0 <= class_id < len(table):
        raise ValueError(f"class id {class_id} out of range [0, {len(table)})")
    return table[class_id]


def restoring_permutation(order) -> tuple[int, ...]:
    """Given ``shuffled[i] = frames[order[i]]``, return ``r`` with ``shuffled[r[k]] = frames[k]``."""
    return tuple(int(v) for v in np.argsort(np.asarray(order), kind="stable"))


def shuffle_with_label(frames, rng: np.random.Generator):
    """Shuffle an ordered tuple uniformly; label is the class of the restoring permutation.

    Returns ``(shuffled, label, order)`` where ``shuffled[i] = frames[order[i]]``.
    """
    n = len(frames)
    _check_n(n)
    order = tuple(int(v) for v in rng.permutation(n))
    shuffled = [frames[i] for i in order]
    return shuffled, class_of(restoring_permutation(order)), order


def unshuffle(shuffled, class_id: int):
    """Reorder a shuffled tuple by the labeled canonical permutation.

    The result is the chronological order or its exact reversal.
    """
    return [shuffled[i] for i in decode(class_id, len(shuffled))]
