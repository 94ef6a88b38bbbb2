"""Logical parallel grids and their placement on virtual ranks.

A module layout is a (TP, CP, PP, DP) grid placed on a contiguous rank range
starting at ``rank_offset``. Ranks are enumerated with TP fastest, then CP,
then DP, then PP, so every TP/CP group is a contiguous block of ranks.
"""

from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass
from typing import Iterator, NamedTuple


class GridError(ValueError):
    pass


class RankOutOfModule(GridError):
    pass


class CoordOutOfBounds(GridError):
    pass


class IndivisibleBatch(GridError):
    pass


class PartialOverlap(GridError):
    pass


@dataclass(frozen=True)
class ModuleLayout:
    name: str
    tp: int = 1
    cp: int = 1
    pp: int = 1
    dp: int = 1
    rank_offset: int = 0

    def __post_init__(self) -> None:
        for field in ("tp", "cp", "pp", "dp"):
            value = getattr(self, field)
            if not isinstance(value, int) or value < 1:
                raise GridError(f"{self.name}: {field} must be a positive integer, got {value!r}")
        if not isinstance(self.rank_offset, int) or self.rank_offset < 0:
            raise GridError(f"{self.name}: rank_offset must be non-negative, got {self.rank_offset!r}")

    @property
    def world_size(self) -> int:
        return self.tp * self.cp * self.pp * self.dp

    @property
    def ranks(self) -> range:
        return range(self.rank_offset, self.rank_offset + self.world_size)

    def __contains__(self, rank: int) -> bool:
        return rank in self.ranks

    def coords(self) -> Iterator[GridCoord]:
        """All coordinates in rank order."""
        for rank in self.ranks:
            yield coord_of_rank(self, rank)

    def describe(self) -> str:
        return (
            f"{self.name}(tp={self.tp}, cp={self.cp}, pp={self.pp}, dp={self.dp}, "
            f"ranks [{self.ranks.start}, {self.ranks.stop}))"
        )


class GridCoord(NamedTuple):
    tp: int
    cp: int
    pp: int
    dp: int


@dataclass(frozen=True, order=True)
class BatchInterval:
    """Half-open sample range ``[start, start + length)``."""

    start: int
    length: int

    def __post_init__(self) -> None:
        if self.start < 0 or self.length < 0:
            raise ValueError(f"invalid interval start={self.start} length={self.length}")

    @property
    def stop(self) -> int:
        return self.start + self.length

    def as_slice(self, base: int = 0) -> slice:
        """Row slice of this interval inside an array whose first row is sample ``base``."""
        return slice(self.start - base, self.stop - base)

    def contains(self, other: BatchInterval) -> bool:
        return self.start <= other.start and other.stop <= self.stop

    def intersect(self, other: BatchInterval) -> BatchInterval | None:
        lo, hi = max(self.start, other.start), min(self.stop, other.stop)
        if hi <= lo:
            return None
        return BatchInterval(lo, hi - lo)

    def __str__(self) -> str:
        return f"[{self.start},{self.stop})"


class Placement(enum.Enum):
    COLOCATED = "colocated"
    NON_COLOCATED = "non-colocated"


@dataclass(frozen=True)
class BoundaryEdge:
    """Activation edge between the last stage of ``source`` and the first stage of ``dest``.

    ``global_batch`` is the number of samples crossing the edge per microbatch and
    ``feature_width`` the number of elements carried per sample.
    """

    source: ModuleLayout
    dest: ModuleLayout
    global_batch: int
    feature_width: int

    @property
    def label(self) -> str:
        return f"{self.source.name}->{self.dest.name}"


def _check_coord(layout: ModuleLayout, coord: GridCoord) -> None:
    limits = (layout.tp, layout.cp, layout.pp, layout.dp)
    for axis, idx, size in zip(GridCoord._fields, coord, limits):
        if not 0 <= idx < size:
            raise CoordOutOfBounds(f"{layout.name}: {axis}_idx={idx} outside [0, {size})")


def rank_of_coord(layout: ModuleLayout, coord: GridCoord) -> int:
    coord = GridCoord(*coord)
    _check_coord(layout, coord)
    local = ((coord.pp * layout.dp + coord.dp) * layout.cp + coord.cp) * layout.tp + coord.tp
    return layout.rank_offset + local


def coord_of_rank(layout: ModuleLayout, rank: int) -> GridCoord:
    if rank not in layout.ranks:
        raise RankOutOfModule(f"rank {rank} is not in {layout.describe()}")
    local = rank - layout.rank_offset
    local, tp = divmod(local, layout.tp)
    local, cp = divmod(local, layout.cp)
    pp, dp = divmod(local, layout.dp)
    return GridCoord(tp=tp, cp=cp, pp=pp, dp=dp)


def partition_batch(batch: int, dp: int) -> list[BatchInterval]:
    """Split ``batch`` samples into ``dp`` equal contiguous intervals in DP order."""
    if dp < 1:
        raise GridError(f"dp must be positive, got {dp}")
    if batch < 1 or batch % dp:
        raise IndivisibleBatch(f"batch of {batch} samples cannot be split into {dp} equal shards")
    size = batch // dp
    return [BatchInterval(i * size, size) for i in range(dp)]


def leader_rank(layout: ModuleLayout, pp_idx: int, dp_idx: int) -> int:
    return rank_of_coord(layout, GridCoord(tp=0, cp=0, pp=pp_idx, dp=dp_idx))


def shard_ranks(layout: ModuleLayout, pp_idx: int, dp_idx: int) -> tuple[int, ...]:
    """Every TP/CP rank of one DP shard on one stage, leader first."""
    return tuple(
        rank_of_coord(layout, GridCoord(tp, cp, pp_idx, dp_idx))
        for cp, tp in itertools.product(range(layout.cp), range(layout.tp))
    )


def tp_group(layout: ModuleLayout, rank: int) -> tuple[int, ...]:
    c = coord_of_rank(layout, rank)
    return tuple(rank_of_coord(layout, c._replace(tp=t)) for t in range(layout.tp))


def dp_cp_group(layout: ModuleLayout, rank: int) -> tuple[int, ...]:
    """Ranks holding replicas of the same parameter slice as ``rank``."""
    c = coord_of_rank(layout, rank)
    return tuple(
        sorted(
            rank_of_coord(layout, c._replace(dp=d, cp=k))
            for d in range(layout.dp)
            for k in range(layout.cp)
        )
    )


def stage_peer(layout: ModuleLayout, rank: int, pp_idx: int) -> int:
    """The rank with the same TP/CP/DP coordinates on another stage."""
    return rank_of_coord(layout, coord_of_rank(layout, rank)._replace(pp=pp_idx))


def placement_of_edge(edge: BoundaryEdge) -> Placement:
    a, b = edge.source.ranks, edge.dest.ranks
    if a == b:
        return Placement.COLOCATED
    if a.stop <= b.start or b.stop <= a.start:
        return Placement.NON_COLOCATED
    raise PartialOverlap(
        f"{edge.label}: rank ranges [{a.start},{a.stop}) and [{b.start},{b.stop}) "
        "overlap without being identical"
    )
