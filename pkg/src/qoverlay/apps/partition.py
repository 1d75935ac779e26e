"""Splitting a unit simulation space with a shared random number.

Three strategies:

* ``circular``: the 1-D space [0, 1) as a circle. Region ``i`` is the
  half-open arc ``[r + i/p, r + (i+1)/p)`` taken modulo 1.
* ``axis``: the d-cube split circularly along the first coordinate only.
* ``unfolded``: the d-cube is cut into ``resolution**d`` cells ordered
  row-major (first coordinate most significant). Cell ``c`` maps to the
  unfolded coordinate ``c / resolution**d`` and is assigned to the arc that
  contains it, so region measures are multiples of ``1 / resolution**d`` and
  differ from ``1/p`` by less than that.

Arcs are half-open, so every point lands in exactly one region; a point
exactly at ``r`` belongs to region 0. Floating-point wrap that yields
``(x - r) mod 1 == 1.0`` is folded to 0, i.e. toward the lower index.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..errors import InvalidInput


@dataclass(frozen=True)
class SharedRandom:
    value: int
    k_bits: int

    def __post_init__(self):
        if self.k_bits < 1:
            raise InvalidInput("k_bits must be positive")
        if not 0 <= self.value < (1 << self.k_bits):
            raise InvalidInput(f"value must lie in [0, 2^{self.k_bits})")


def to_fraction(r: SharedRandom) -> float:
    """``value * 2**-K``; exact whenever ``K <= 53``, otherwise rounded to a double."""
    return math.ldexp(r.value, -r.k_bits)


@dataclass(frozen=True)
class UnitPoint:
    coordinates: tuple[float, ...]

    def __post_init__(self):
        coords = tuple(float(c) for c in self.coordinates)
        if not coords:
            raise InvalidInput("a point needs at least one coordinate")
        if any(not 0.0 <= c < 1.0 for c in coords):
            raise InvalidInput("coordinates must lie in [0, 1)")
        object.__setattr__(self, "coordinates", coords)

    @property
    def dim(self) -> int:
        return len(self.coordinates)


class Strategy(str, enum.Enum):
    CIRCULAR = "circular"
    AXIS = "axis"
    UNFOLDED = "unfolded"


def _arc_index(u: np.ndarray, r: float, parts: int) -> np.ndarray:
    # u in [0, 1) and r in [0, 1), so one conditional wrap replaces a modulo.
    shifted = np.subtract(u, r, dtype=float)
    np.add(shifted, 1.0, out=shifted, where=shifted < 0.0)
    shifted[shifted >= 1.0] = 0.0
    shifted *= parts
    idx = shifted.astype(np.int64)
    np.minimum(idx, parts - 1, out=idx)
    return idx


@dataclass(frozen=True)
class Region:
    strategy: Strategy
    r: float
    parts: int
    index: int
    dim: int = 1
    resolution: int = 1

    @property
    def start(self) -> float:
        """Arc start on the circular (or unfolded, or first-axis) coordinate."""
        return (self.r + self.index / self.parts) % 1.0

    @property
    def length(self) -> float:
        return 1.0 / self.parts

    def cells(self) -> np.ndarray:
        """Row-major indices of the cells in this region (unfolded strategy)."""
        if self.strategy is not Strategy.UNFOLDED:
            raise InvalidInput("cells are defined for the unfolded strategy only")
        n = self.resolution ** self.dim
        return np.flatnonzero(_arc_index(np.arange(n) / n, self.r, self.parts) == self.index)

    @property
    def measure(self) -> float:
        if self.strategy is Strategy.UNFOLDED:
            return len(self.cells()) / self.resolution ** self.dim
        return self.length

    def contains(self, points) -> np.ndarray | bool:
        """Membership of one point or of an ``(n, d)`` array of points."""
        single = isinstance(points, UnitPoint)
        arr = _as_array(points, self.dim)
        inside = locate_array(arr, self.strategy, self.r, self.parts, self.dim, self.resolution) == self.index
        return bool(inside[0]) if single else inside


def _as_array(points, dim: int) -> np.ndarray:
    if isinstance(points, UnitPoint):
        arr = np.asarray([points.coordinates])
    else:
        arr = np.asarray(points, dtype=float)
        if arr.ndim == 1:
            arr = arr[:, None] if dim == 1 else arr[None, :]
    if arr.shape[1] != dim:
        raise InvalidInput(f"point dimension {arr.shape[1]} does not match region dimension {dim}")
    return arr


def unfold(points: np.ndarray, resolution: int) -> np.ndarray:
    """Unfolded coordinate ``cell_index / resolution**d`` of each point."""
    d = points.shape[1]
    # Cell indices stay below 2**53, so float arithmetic is exact here.
    flat = np.zeros(len(points))
    for j in range(d):
        cell = np.multiply(points[:, j], resolution)
        np.floor(cell, out=cell)
        np.minimum(cell, resolution - 1, out=cell)
        flat *= resolution
        flat += cell
    flat /= resolution ** d
    return flat


def locate_array(points: np.ndarray, strategy: Strategy, r: float, parts: int, dim: int,
                 resolution: int) -> np.ndarray:
    if strategy is Strategy.CIRCULAR:
        return _arc_index(points[:, 0], r, parts)
    if strategy is Strategy.AXIS:
        return _arc_index(points[:, 0], r, parts)
    return _arc_index(unfold(points, resolution), r, parts)


@dataclass(frozen=True)
class Partition:
    regions: tuple[Region, ...]
    parts: int
    strategy: Strategy
    r: float
    dim: int
    resolution: int = 1

    def locate(self, points) -> np.ndarray | int:
        """Region index of each point."""
        single = isinstance(points, UnitPoint)
        arr = _as_array(points, self.dim)
        idx = locate_array(arr, self.strategy, self.r, self.parts, self.dim, self.resolution)
        return int(idx[0]) if single else idx

    def measures(self) -> list[float]:
        return [reg.measure for reg in self.regions]

    @property
    def quantization(self) -> float:
        """Largest allowed deviation of a region measure from ``1/parts``."""
        if self.strategy is Strategy.UNFOLDED:
            return 1.0 / self.resolution ** self.dim
        return 0.0


def _check(r: float, parts: int, min_parts: int = 2) -> None:
    if parts < min_parts:
        raise InvalidInput(f"parts must be at least {min_parts}")
    if not 0.0 <= r < 1.0:
        raise InvalidInput("r must lie in [0, 1)")


def split_circular(r: float, parts: int) -> Partition:
    _check(r, parts)
    regions = tuple(Region(Strategy.CIRCULAR, r, parts, i) for i in range(parts))
    return Partition(regions, parts, Strategy.CIRCULAR, r, 1)


def split_axis_2d(r: float, parts: int = 2, dim: int = 2) -> Partition:
    """Split on the first coordinate; ``parts=2, dim=2`` is the half-square split."""
    _check(r, parts)
    if dim < 1:
        raise InvalidInput("dim must be positive")
    regions = tuple(Region(Strategy.AXIS, r, parts, i, dim) for i in range(parts))
    return Partition(regions, parts, Strategy.AXIS, r, dim)


def split_unfolded(r: float, parts: int, dim: int, resolution: int) -> Partition:
    _check(r, parts)
    if dim < 1 or resolution < 1:
        raise InvalidInput("dim and resolution must be positive")
    regions = tuple(Region(Strategy.UNFOLDED, r, parts, i, dim, resolution) for i in range(parts))
    return Partition(regions, parts, Strategy.UNFOLDED, r, dim, resolution)


def split(strategy: Strategy | str, r: float, parts: int, dim: int = 1, resolution: int = 16) -> Partition:
    strategy = Strategy(strategy)
    if strategy is Strategy.CIRCULAR:
        if dim != 1:
            raise InvalidInput("the circular split is one-dimensional")
        return split_circular(r, parts)
    if strategy is Strategy.AXIS:
        return split_axis_2d(r, parts, dim)
    return split_unfolded(r, parts, dim, resolution)


def membership(point: UnitPoint | Sequence[float], region: Region) -> bool:
    if not isinstance(point, UnitPoint):
        point = UnitPoint(tuple(point))
    return region.contains(point)
