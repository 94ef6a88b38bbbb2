import itertools

import pytest
from hypothesis import given, strategies as st

from hetpar.grid import (
    BatchInterval,
    BoundaryEdge,
    CoordOutOfBounds,
    GridCoord,
    IndivisibleBatch,
    ModuleLayout,
    PartialOverlap,
    Placement,
    RankOutOfModule,
    coord_of_rank,
    dp_cp_group,
    leader_rank,
    partition_batch,
    placement_of_edge,
    rank_of_coord,
    shard_ranks,
    tp_group,
)


def enumerate_coords(lay):
    # tp fastest, then cp, then dp, then pp
    out = []
    for pp, dp, cp, tp in itertools.product(range(lay.pp), range(lay.dp), range(lay.cp), range(lay.tp)):
        out.append(GridCoord(tp, cp, pp, dp))
    return out


layouts = st.builds(
    ModuleLayout,
    name=st.just("m"),
    tp=st.sampled_from([1, 2, 4]),
    cp=st.sampled_from([1, 2]),
    pp=st.sampled_from([1, 2, 3]),
    dp=st.sampled_from([1, 2, 4]),
    rank_offset=st.integers(0, 16),
)


def test_singleton_grid():
    lay = ModuleLayout("m")
    assert coord_of_rank(lay, 0) == GridCoord(0, 0, 0, 0)
    assert rank_of_coord(lay, GridCoord(0, 0, 0, 0)) == 0


def test_coord_of_rank_matches_enumeration():
    lay = ModuleLayout("m", tp=2, pp=2, dp=2)
    assert coord_of_rank(lay, 5) == enumerate_coords(lay)[5]


def test_rank_below_offset():
    lay = ModuleLayout("m", tp=4, dp=2, rank_offset=8)
    with pytest.raises(RankOutOfModule):
        coord_of_rank(lay, 7)
    with pytest.raises(RankOutOfModule):
        coord_of_rank(lay, 16)


def test_rank_of_coord_bijection():
    lay = ModuleLayout("m", tp=2, dp=4)
    ranks = [rank_of_coord(lay, c) for c in enumerate_coords(lay)]
    assert ranks == list(range(8))


def test_coord_out_of_bounds():
    with pytest.raises(CoordOutOfBounds):
        rank_of_coord(ModuleLayout("m", tp=2), GridCoord(2, 0, 0, 0))


@given(layouts)
def test_rank_coord_roundtrip(lay):
    coords = enumerate_coords(lay)
    for i, c in enumerate(coords):
        r = rank_of_coord(lay, c)
        assert r == lay.rank_offset + i
        assert coord_of_rank(lay, r) == c


def test_layout_rejects_zero_sizes():
    with pytest.raises(ValueError):
        ModuleLayout("m", tp=0)
    with pytest.raises(ValueError):
        ModuleLayout("m", rank_offset=-1)


def test_partition_examples():
    assert partition_batch(8, 1) == [BatchInterval(0, 8)]
    assert [str(iv) for iv in partition_batch(8, 4)] == ["[0,2)", "[2,4)", "[4,6)", "[6,8)"]
    with pytest.raises(IndivisibleBatch):
        partition_batch(10, 4)


@given(st.integers(1, 8), st.integers(1, 16))
def test_partition_matches_sample_assignment(dp, per):
    b = dp * per
    parts = partition_batch(b, dp)
    assert sum(p.length for p in parts) == b
    for j in range(b):
        owner = j * dp // b
        assert parts[owner].start <= j < parts[owner].stop
    assert all(a.stop == c.start for a, c in zip(parts, parts[1:]))


def test_leaders_trivial_grid():
    lay = ModuleLayout("m", dp=4, pp=2)
    for pp in range(2):
        for dp in range(4):
            assert shard_ranks(lay, pp, dp) == (leader_rank(lay, pp, dp),)


def test_leaders_against_enumeration():
    lay = ModuleLayout("m", tp=2, cp=2, dp=2)
    expect = [lay.rank_offset + i for i, c in enumerate(enumerate_coords(lay)) if c.tp == 0 and c.cp == 0]
    assert [leader_rank(lay, 0, d) for d in range(2)] == expect


def test_leader_offset_translation():
    a = ModuleLayout("m", tp=2, cp=2, pp=2, dp=2)
    b = ModuleLayout("m", tp=2, cp=2, pp=2, dp=2, rank_offset=8)
    for pp in range(2):
        for dp in range(2):
            assert leader_rank(b, pp, dp) == leader_rank(a, pp, dp) + 8


@given(layouts)
def test_leader_properties(lay):
    for pp in range(lay.pp):
        leaders = {leader_rank(lay, pp, d) for d in range(lay.dp)}
        assert len(leaders) == lay.dp
        for r in leaders:
            c = coord_of_rank(lay, r)
            assert (c.tp, c.cp, c.pp) == (0, 0, pp)


@given(layouts)
def test_groups_partition_module(lay):
    tp_groups = {tp_group(lay, r) for r in lay.ranks}
    dp_groups = {dp_cp_group(lay, r) for r in lay.ranks}
    for groups, size in ((tp_groups, lay.tp), (dp_groups, lay.dp * lay.cp)):
        assert sorted(r for g in groups for r in g) == list(lay.ranks)
        assert all(len(g) == size for g in groups)


def _edge(a, b):
    return BoundaryEdge(a, b, 8, 1)


def test_placement_examples():
    shared_a, shared_b = ModuleLayout("l", tp=4, dp=2), ModuleLayout("v", dp=8)
    assert placement_of_edge(_edge(shared_b, shared_a)) is Placement.COLOCATED
    llm, vis = ModuleLayout("l", tp=2, pp=2), ModuleLayout("v", dp=4, rank_offset=4)
    assert placement_of_edge(_edge(vis, llm)) is Placement.NON_COLOCATED
    with pytest.raises(PartialOverlap):
        placement_of_edge(_edge(ModuleLayout("v", dp=6), ModuleLayout("l", dp=4, rank_offset=4)))


@given(layouts, layouts)
def test_placement_symmetric(a, b):
    def kind(x, y):
        try:
            return placement_of_edge(_edge(x, y))
        except PartialOverlap:
            return "partial"

    assert kind(a, b) == kind(b, a)
