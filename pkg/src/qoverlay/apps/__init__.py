"""Applications of synchronized randomness: space splitting, Monte Carlo, search."""

from .montecarlo import (
    CATALOG,
    Estimate,
    RegionEstimate,
    aggregate,
    estimand,
    parallel_monte_carlo,
    sample_region,
    single_node_monte_carlo,
)
from .partition import (
    Partition,
    Region,
    SharedRandom,
    Strategy,
    UnitPoint,
    membership,
    split,
    split_axis_2d,
    split_circular,
    split_unfolded,
    to_fraction,
)
from .search import SearchResult, parallel_las_vegas_search, probe_sets, shared_permutation, splitmix64


def draw_shared(handle, k_bits: int) -> SharedRandom:
    """Draw a K-bit shared number from a synchronized_random circuit or path end."""
    return SharedRandom(handle.sync_random(k_bits), k_bits)


__all__ = [
    "CATALOG", "Estimate", "Partition", "Region", "RegionEstimate", "SearchResult", "SharedRandom",
    "Strategy", "UnitPoint", "aggregate", "draw_shared", "estimand", "membership",
    "parallel_las_vegas_search", "parallel_monte_carlo", "probe_sets", "sample_region",
    "shared_permutation", "single_node_monte_carlo", "split", "split_axis_2d", "split_circular",
    "split_unfolded", "splitmix64", "to_fraction",
]
