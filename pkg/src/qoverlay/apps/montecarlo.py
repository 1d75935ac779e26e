"""Partitioned Monte Carlo integration over the unit cube."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from ..errors import InvalidInput, PartialAggregate
from .partition import Partition, Region, Strategy

Estimand = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class CatalogEntry:
    name: str
    fn: Estimand
    exact: Callable[[int], float]


def _constant(x: np.ndarray) -> np.ndarray:
    return np.ones(len(x))


def _quarter_circle(x: np.ndarray) -> np.ndarray:
    return (np.sum(x * x, axis=1) < 1.0).astype(float)


def _product_of_sines(x: np.ndarray) -> np.ndarray:
    return np.prod(np.sin(np.pi * x), axis=1)


def _ball_orthant(d: int) -> float:
    return math.pi ** (d / 2) / math.gamma(d / 2 + 1) / 2 ** d


CATALOG: dict[str, CatalogEntry] = {
    "constant": CatalogEntry("constant", _constant, lambda d: 1.0),
    "quarter_circle": CatalogEntry("quarter_circle", _quarter_circle, _ball_orthant),
    "product_of_sines": CatalogEntry("product_of_sines", _product_of_sines, lambda d: (2 / math.pi) ** d),
}


def estimand(name: str) -> CatalogEntry:
    try:
        return CATALOG[name]
    except KeyError:
        raise InvalidInput(f"unknown estimand {name!r}; choose from {sorted(CATALOG)}") from None


@dataclass(frozen=True)
class RegionEstimate:
    index: int
    mean: float
    stderr: float
    samples: int
    measure: float


@dataclass(frozen=True)
class Estimate:
    value: float
    stderr: float
    regions: tuple[RegionEstimate, ...]

    @property
    def samples(self) -> int:
        return sum(r.samples for r in self.regions)


def sample_region(region: Region, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` points uniform in ``region`` (direct sampling, no rejection)."""
    d = region.dim
    if region.strategy is Strategy.UNFOLDED:
        cells = region.cells()
        res = region.resolution
        pick = cells[rng.integers(0, len(cells), size=n)]
        digits = np.empty((n, d), dtype=np.int64)
        for j in range(d - 1, -1, -1):
            digits[:, j] = pick % res
            pick = pick // res
        return (digits + rng.random((n, d))) / res
    pts = rng.random((n, d))
    pts[:, 0] = np.mod(region.start + region.length * pts[:, 0], 1.0)
    pts[pts >= 1.0] = 0.0
    return pts


def estimate_region(fn: Estimand, region: Region, n: int, seed) -> RegionEstimate:
    if n < 1:
        raise InvalidInput("each node needs at least one sample")
    rng = np.random.default_rng(seed)
    values = np.asarray(fn(sample_region(region, n, rng)), dtype=float)
    sd = float(values.std(ddof=1)) if n > 1 else 0.0
    return RegionEstimate(region.index, float(values.mean()), sd / math.sqrt(n), n, region.measure)


def aggregate(reports: Iterable[RegionEstimate], parts: int) -> Estimate:
    """Measure-weighted sum of region means with pooled standard error."""
    by_index = {r.index: r for r in reports}
    missing = [i for i in range(parts) if i not in by_index]
    regions = tuple(by_index[i] for i in sorted(by_index))
    value = sum(r.measure * r.mean for r in regions)
    stderr = math.sqrt(sum((r.measure * r.stderr) ** 2 for r in regions))
    est = Estimate(value, stderr, regions)
    if missing:
        raise PartialAggregate(missing, est)
    return est


def parallel_monte_carlo(
    fn: Estimand | str,
    partition: Partition,
    samples_per_node: int,
    seeds: Sequence | None = None,
    workers: int = 1,
    failed_nodes: Iterable[int] = (),
) -> Estimate:
    """One worker per region; workers share nothing and report to the aggregator.

    ``failed_nodes`` simulates nodes that never report, which raises
    :class:`PartialAggregate` naming the missing regions.
    """
    if isinstance(fn, str):
        fn = estimand(fn).fn
    seeds = list(seeds) if seeds is not None else list(range(partition.parts))
    if len(seeds) != partition.parts:
        raise InvalidInput("need one seed per node")
    failed = set(failed_nodes)
    jobs = [(reg, seeds[reg.index]) for reg in partition.regions if reg.index not in failed]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            reports = list(pool.map(lambda job: estimate_region(fn, job[0], samples_per_node, job[1]), jobs))
    else:
        reports = [estimate_region(fn, reg, samples_per_node, seed) for reg, seed in jobs]
    return aggregate(reports, partition.parts)


def single_node_monte_carlo(fn: Estimand | str, dim: int, samples: int, seed) -> Estimate:
    """Plain Monte Carlo over the whole cube (the unpartitioned reference)."""
    if isinstance(fn, str):
        fn = estimand(fn).fn
    rng = np.random.default_rng(seed)
    values = np.asarray(fn(rng.random((samples, dim))), dtype=float)
    se = float(values.std(ddof=1)) / math.sqrt(samples)
    return Estimate(float(values.mean()), se, (RegionEstimate(0, float(values.mean()), se, samples, 1.0),))
