"""Las Vegas search with a permutation every node derives from the shared number.

Permutation: SplitMix64 seeded with ``value mod 2**64`` produces one 64-bit
key per index (the ``i``-th output is ``mix(seed + (i + 1) * GAMMA)``).
Indices sorted by ``(key, index)`` give the probe order. Node ``i`` of ``p``
probes positions ``i, i + p, i + 2p, ...``; nodes advance in lockstep, and the
earliest round with a hit wins, ties going to the lower node index.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable, Sequence

import numpy as np

from ..errors import InvalidInput, NotFound
from .partition import SharedRandom

GAMMA = 0x9E3779B97F4A7C15
_MASK = (1 << 64) - 1


def splitmix64(seed: int, count: int) -> np.ndarray:
    """The first ``count`` SplitMix64 outputs for ``seed``."""
    with np.errstate(over="ignore"):
        z = (np.uint64(seed & _MASK)
             + np.arange(1, count + 1, dtype=np.uint64) * np.uint64(GAMMA))
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))


def shared_permutation(n: int, shared: SharedRandom) -> np.ndarray:
    if n < 0:
        raise InvalidInput("n must be non-negative")
    keys = splitmix64(shared.value, n)
    return np.lexsort((np.arange(n), keys))


def probe_sets(n: int, shared: SharedRandom, nodes: int) -> list[np.ndarray]:
    if nodes < 1:
        raise InvalidInput("need at least one node")
    perm = shared_permutation(n, shared)
    return [perm[i::nodes] for i in range(nodes)]


@dataclass(frozen=True)
class SearchResult:
    index: int
    winner: int
    rounds: int
    probes_per_node: tuple[int, ...]

    @property
    def total_probes(self) -> int:
        return sum(self.probes_per_node)


def parallel_las_vegas_search(items: Sequence[Any], target: Callable[[Any], bool],
                              shared: SharedRandom, nodes: int) -> SearchResult:
    """Find an index whose item satisfies ``target``.

    ``rounds`` is the number of probes the winning node made, which is the
    wall-clock cost when nodes run side by side.
    """
    n = len(items)
    if nodes < 1:
        raise InvalidInput("need at least one node")
    perm = shared_permutation(n, shared)
    for start in range(0, n, nodes):
        rnd = start // nodes
        hits = [i for i in range(min(nodes, n - start)) if target(items[int(perm[start + i])])]
        if hits:
            winner = hits[0]
            probes = tuple(rnd + 1 if start + i < n else rnd for i in range(nodes))
            return SearchResult(int(perm[start + winner]), winner, rnd + 1, probes)
    raise NotFound(f"no item satisfies the predicate after probing all {n} indices")
