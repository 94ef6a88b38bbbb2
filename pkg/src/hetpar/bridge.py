"""Boundary communicators between modules with independent layouts.

A :class:`BridgePlan` is compiled once per edge and is identical on every rank
that builds it. A :class:`Bridge` executes the plan on the simulated fabric,
one rank at a time: every rank-level method is a generator meant to be driven
from inside a rank program (``result = yield from bridge.forward_dest(...)``).
:func:`bridge_forward` and :func:`bridge_backward` wrap the rank-level pieces
into a self-contained fabric run for tests and experiments.

Non-colocated edges move data only between boundary leaders (the tp=0, cp=0
rank of each DP shard) and then broadcast inside the receiving shard.
Colocated edges reinterpret the shared rank set: ranks that already hold the
destination interval slice it locally, and the rest all-gather the source
pieces that make up their destination shard.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Iterator, Mapping

import numpy as np

from hetpar import simnet
from hetpar.grid import (
    BatchInterval,
    BoundaryEdge,
    GridError,
    Placement,
    coord_of_rank,
    partition_batch,
    placement_of_edge,
    shard_ranks,
)


class BridgeError(RuntimeError):
    pass


class NonIntegerFan(BridgeError, GridError):
    pass


class PlanInfeasible(BridgeError, GridError):
    pass


class ShardIntervalMismatch(BridgeError):
    pass


class MissingSourceShard(BridgeError):
    pass


class GradIntervalMismatch(BridgeError):
    pass


class UnknownMicrobatch(BridgeError):
    pass


@dataclass(frozen=True)
class DpRelation:
    kind: str  # "equal", "fan-in" or "fan-out"
    factor: int = 1

    def __str__(self) -> str:
        return self.kind if self.kind == "equal" else f"{self.kind}({self.factor})"


def classify_dp_relation(edge: BoundaryEdge) -> DpRelation:
    du, dv = edge.source.dp, edge.dest.dp
    if du == dv:
        return DpRelation("equal")
    if du > dv and du % dv == 0:
        return DpRelation("fan-in", du // dv)
    if dv > du and dv % du == 0:
        return DpRelation("fan-out", dv // du)
    raise NonIntegerFan(f"{edge.label}: DP {du} -> {dv} is not an integer fan ratio")


@dataclass(frozen=True)
class ShardedTensor:
    interval: BatchInterval
    payload: np.ndarray

    def __post_init__(self) -> None:
        if self.payload.ndim != 2 or self.payload.shape[0] != self.interval.length:
            raise ValueError(
                f"payload shape {self.payload.shape} does not match interval {self.interval}"
            )

    @property
    def feature_width(self) -> int:
        return self.payload.shape[1]


@dataclass(frozen=True)
class Transfer:
    """One leader-to-leader message of a non-colocated edge (forward direction)."""

    src_dp: int
    dst_dp: int
    src_rank: int
    dst_rank: int
    interval: BatchInterval


@dataclass(frozen=True)
class GatherGroup:
    """A colocated all-gather: ``pieces`` are contributed in batch order by their ranks."""

    name: str
    members: tuple[int, ...]
    pieces: tuple[tuple[int, BatchInterval], ...]
    receivers: tuple[int, ...]
    interval: BatchInterval

    def piece_of(self, rank: int) -> BatchInterval | None:
        for r, piece in self.pieces:
            if r == rank:
                return piece
        return None


@dataclass(frozen=True)
class RankAction:
    """How one rank obtains its side of the transform on a colocated edge."""

    kind: str  # "local", "select" or "gather"
    interval: BatchInterval  # the interval the rank ends up holding
    parent: BatchInterval | None = None  # interval the rank slices from, for local/select
    group: str | None = None


@dataclass(frozen=True)
class BridgePlan:
    edge: BoundaryEdge
    placement: Placement
    relation: DpRelation
    src_intervals: tuple[BatchInterval, ...]
    dst_intervals: tuple[BatchInterval, ...]
    src_blocks: tuple[tuple[int, ...], ...]  # per source DP shard, ranks of the last stage
    dst_blocks: tuple[tuple[int, ...], ...]  # per dest DP shard, ranks of the first stage
    routes: tuple[tuple[tuple[int, BatchInterval], ...], ...]  # per dest shard: (src_dp, piece)
    transfers: tuple[Transfer, ...] = ()
    fwd_actions: Mapping[int, RankAction] = field(default_factory=dict)
    fwd_groups: tuple[GatherGroup, ...] = ()
    bwd_actions: Mapping[int, RankAction] = field(default_factory=dict)
    bwd_groups: tuple[GatherGroup, ...] = ()

    @property
    def label(self) -> str:
        return f"bridge:{self.edge.label}"

    @property
    def src_leaders(self) -> tuple[int, ...]:
        return tuple(block[0] for block in self.src_blocks)

    @property
    def dst_leaders(self) -> tuple[int, ...]:
        return tuple(block[0] for block in self.dst_blocks)

    @property
    def source_ranks(self) -> tuple[int, ...]:
        return tuple(sorted(r for block in self.src_blocks for r in block))

    @property
    def dest_ranks(self) -> tuple[int, ...]:
        return tuple(sorted(r for block in self.dst_blocks for r in block))

    def src_dp_of(self, rank: int) -> int:
        return coord_of_rank(self.edge.source, rank).dp

    def dst_dp_of(self, rank: int) -> int:
        return coord_of_rank(self.edge.dest, rank).dp

    def replica_group(self, rank: int) -> tuple[int, ...]:
        """Dest ranks of ``rank``'s DP shard with the same TP index: its CP replicas."""
        dest = self.edge.dest
        tp = coord_of_rank(dest, rank).tp
        block = self.dst_blocks[self.dst_dp_of(rank)]
        return tuple(r for r in block if coord_of_rank(dest, r).tp == tp)

    def interval_records(self) -> dict[int, list[tuple[int, BatchInterval]]]:
        return {j: list(route) for j, route in enumerate(self.routes)}

    def export(self) -> str:
        """One line per transfer or collective: direction, kind, source, dest/group, interval, bytes."""
        width = self.edge.feature_width
        nbytes = lambda iv: iv.length * width * simnet.ELEMENT_BYTES  # noqa: E731
        lines = [
            f"# {self.edge.label} placement={self.placement.value} relation={self.relation} "
            f"B={self.edge.global_batch} width={width}"
        ]
        if self.placement is Placement.NON_COLOCATED:
            for t in self.transfers:
                lines.append(f"fwd p2p {t.src_rank} {t.dst_rank} {t.interval} {nbytes(t.interval)}")
            for j, block in enumerate(self.dst_blocks):
                iv = self.dst_intervals[j]
                lines.append(f"fwd bcast {block[0]} {simnet._group_str(block)} {iv} {nbytes(iv)}")
            for j, block in enumerate(self.dst_blocks):
                group = self.replica_group(block[0])
                if len(group) > 1:
                    iv = self.dst_intervals[j]
                    lines.append(f"bwd reduce {block[0]} {simnet._group_str(group)} {iv} {nbytes(iv)}")
            for t in self.transfers:
                lines.append(f"bwd p2p {t.dst_rank} {t.src_rank} {t.interval} {nbytes(t.interval)}")
            for i, block in enumerate(self.src_blocks):
                iv = self.src_intervals[i]
                lines.append(f"bwd bcast {block[0]} {simnet._group_str(block)} {iv} {nbytes(iv)}")
            return "\n".join(lines) + "\n"
        for direction, actions, groups in (
            ("fwd", self.fwd_actions, self.fwd_groups),
            ("bwd", self.bwd_actions, self.bwd_groups),
        ):
            if direction == "bwd":
                for j, block in enumerate(self.dst_blocks):
                    for group in sorted({self.replica_group(r) for r in block}):
                        if len(group) > 1:
                            iv = self.dst_intervals[j]
                            lines.append(f"bwd allreduce - {simnet._group_str(group)} {iv} {nbytes(iv)}")
            for rank in sorted(actions):
                a = actions[rank]
                if a.kind != "gather":
                    lines.append(f"{direction} {a.kind} {rank} {rank} {a.interval} 0")
            for g in groups:
                lines.append(
                    f"{direction} allgather - {simnet._group_str(g.members)} {g.interval} {nbytes(g.interval)}"
                )
        return "\n".join(lines) + "\n"


def _routes(src: list[BatchInterval], dst: list[BatchInterval]) -> tuple:
    out = []
    for d in dst:
        pieces = []
        for i, s in enumerate(src):
            piece = s.intersect(d)
            if piece is not None:
                pieces.append((i, piece))
        out.append(tuple(pieces))
    return tuple(out)


def plan_bridge(edge: BoundaryEdge) -> BridgePlan:
    """Compile the static routing of ``edge``; every rank computing this gets the same plan."""
    try:
        placement = placement_of_edge(edge)
    except GridError as exc:
        raise PlanInfeasible(str(exc)) from exc
    relation = classify_dp_relation(edge)
    src_iv = partition_batch(edge.global_batch, edge.source.dp)
    dst_iv = partition_batch(edge.global_batch, edge.dest.dp)
    last = edge.source.pp - 1
    src_blocks = tuple(shard_ranks(edge.source, last, i) for i in range(edge.source.dp))
    dst_blocks = tuple(shard_ranks(edge.dest, 0, j) for j in range(edge.dest.dp))
    routes = _routes(src_iv, dst_iv)
    common = dict(
        edge=edge,
        placement=placement,
        relation=relation,
        src_intervals=tuple(src_iv),
        dst_intervals=tuple(dst_iv),
        src_blocks=src_blocks,
        dst_blocks=dst_blocks,
        routes=routes,
    )
    if placement is Placement.NON_COLOCATED:
        transfers = tuple(
            Transfer(i, j, src_blocks[i][0], dst_blocks[j][0], piece)
            for j, route in enumerate(routes)
            for i, piece in route
        )
        return BridgePlan(**common, transfers=transfers)

    # Colocated: which source shard (if any) each shared rank holds.
    holder_dp: dict[int, int] = {r: i for i, block in enumerate(src_blocks) for r in block}
    dst_dp: dict[int, int] = {r: j for j, block in enumerate(dst_blocks) for r in block}

    fwd_actions, fwd_groups = _colocated_forward(
        f"bridge:{edge.label}", src_iv, dst_iv, src_blocks, dst_blocks, routes, holder_dp
    )
    bwd_actions, bwd_groups = _colocated_backward(
        f"bridge:{edge.label}", src_iv, dst_iv, src_blocks, dst_blocks, holder_dp, dst_dp
    )
    return BridgePlan(
        **common,
        fwd_actions=fwd_actions,
        fwd_groups=fwd_groups,
        bwd_actions=bwd_actions,
        bwd_groups=bwd_groups,
    )


def _merge_groups(label, requests):
    """Fold per-receiver gather requests with identical contributor lists into one group.

    ``requests`` maps receiver -> (ordered (contributor, piece) tuple, target interval).
    """
    merged: dict[tuple, list[int]] = {}
    targets: dict[tuple, BatchInterval] = {}
    for receiver, (pieces, target) in sorted(requests.items()):
        merged.setdefault(pieces, []).append(receiver)
        targets[pieces] = target
    groups = []
    for pieces in sorted(merged, key=lambda p: (targets[p].start, [r for r, _ in p])):
        contributors = [r for r, _ in pieces]
        extra = sorted(r for r in merged[pieces] if r not in contributors)
        groups.append(
            GatherGroup(
                name=f"{label}:g{len(groups)}",
                members=tuple(contributors + extra),
                pieces=pieces,
                receivers=tuple(merged[pieces]),
                interval=targets[pieces],
            )
        )
    return tuple(groups)


def _colocated_forward(label, src_iv, dst_iv, src_blocks, dst_blocks, routes, holder_dp):
    actions: dict[int, RankAction] = {}
    requests = {}
    for j, block in enumerate(dst_blocks):
        target = dst_iv[j]
        for r in block:
            i = holder_dp.get(r)
            if i is not None and src_iv[i].contains(target):
                kind = "local" if src_iv[i] == target else "select"
                actions[r] = RankAction(kind, target, parent=src_iv[i])
                continue
            # Lane: position among in-block holders of the same source shard, so that
            # aligned fan-in partitions the block into groups of exactly k ranks.
            if i is not None:
                lane = [h for h in src_blocks[i] if h in block].index(r)
            else:
                lane = block.index(r)
            pieces = []
            for src_dp, piece in routes[j]:
                if src_dp == i:
                    pieces.append((r, piece))
                    continue
                inside = [h for h in src_blocks[src_dp] if h in block]
                pool = inside or list(src_blocks[src_dp])
                pieces.append((pool[lane % len(pool)], piece))
            requests[r] = (tuple(pieces), target)
    groups = _merge_groups(f"{label}:fwd", requests)
    for g in groups:
        for r in g.receivers:
            actions[r] = RankAction("gather", g.interval, group=g.name)
    return actions, groups


def _colocated_backward(label, src_iv, dst_iv, src_blocks, dst_blocks, holder_dp, dst_dp):
    actions: dict[int, RankAction] = {}
    requests = {}
    for i, block in enumerate(src_blocks):
        target = src_iv[i]
        overlaps = [(j, d.intersect(target)) for j, d in enumerate(dst_iv) if d.intersect(target)]
        for s in block:
            j_own = dst_dp.get(s)
            if j_own is not None and dst_iv[j_own].contains(target):
                kind = "local" if dst_iv[j_own] == target else "select"
                actions[s] = RankAction(kind, target, parent=dst_iv[j_own])
                continue
            if j_own is not None:
                lane = [h for h in dst_blocks[j_own] if holder_dp.get(h) == i].index(s)
            else:
                lane = block.index(s)
            pieces = []
            for j, piece in overlaps:
                if j == j_own:
                    pieces.append((s, piece))
                    continue
                inside = [h for h in dst_blocks[j] if holder_dp.get(h) == i]
                pool = inside or list(dst_blocks[j])
                pieces.append((pool[lane % len(pool)], piece))
            requests[s] = (tuple(pieces), target)
    groups = _merge_groups(f"{label}:bwd", requests)
    for g in groups:
        for s in g.receivers:
            actions[s] = RankAction("gather", g.interval, group=g.name)
    return actions, groups


class Bridge:
    """Executes one plan, keeping per-rank forward records until backward consumes them."""

    def __init__(self, plan: BridgePlan):
        self.plan = plan
        self._fwd_src: dict[tuple[int, int], BatchInterval] = {}
        self._fwd_dst: dict[tuple[int, int], BatchInterval] = {}
        self._groups = {g.name: g for g in plan.fwd_groups + plan.bwd_groups}

    @property
    def edge(self) -> BoundaryEdge:
        return self.plan.edge

    # -- bookkeeping ----------------------------------------------------------

    def _check_source(self, rank: int, shard: ShardedTensor | None) -> BatchInterval:
        plan = self.plan
        if rank not in plan.edge.source or coord_of_rank(plan.edge.source, rank).pp != plan.edge.source.pp - 1:
            raise MissingSourceShard(f"{plan.edge.label}: rank {rank} is not on the source boundary stage")
        want = plan.src_intervals[plan.src_dp_of(rank)]
        if shard is None:
            raise MissingSourceShard(f"{plan.edge.label}: rank {rank} supplied no shard for {want}")
        if shard.interval != want or shard.feature_width != plan.edge.feature_width:
            raise ShardIntervalMismatch(
                f"{plan.edge.label}: rank {rank} supplied {shard.interval} x {shard.feature_width}, "
                f"plan expects {want} x {plan.edge.feature_width}"
            )
        return want

    def _pop(self, records: dict, rank: int, mb: int) -> BatchInterval:
        try:
            return records.pop((rank, mb))
        except KeyError:
            raise UnknownMicrobatch(
                f"{self.plan.edge.label}: rank {rank} has no unconsumed forward record for microbatch {mb}"
            ) from None

    def _record(self, records: dict, rank: int, mb: int, interval: BatchInterval) -> None:
        if (rank, mb) in records:
            raise BridgeError(f"{self.plan.edge.label}: rank {rank} already ran forward for microbatch {mb}")
        records[(rank, mb)] = interval

    def pending(self) -> int:
        return len(self._fwd_src) + len(self._fwd_dst)

    # -- non-colocated -------------------------------------------------------

    def _backward_pieces(self, dst_dp: int) -> list[Transfer]:
        return [t for t in self.plan.transfers if t.dst_dp == dst_dp]

    def forward_source(self, rank: int, shard: ShardedTensor | None, mb: int) -> Iterator:
        """Source side of a non-colocated forward: leaders send their batch pieces."""
        plan = self.plan
        interval = self._check_source(rank, shard)
        self._record(self._fwd_src, rank, mb, interval)
        if rank in plan.src_leaders:
            for t in plan.transfers:
                if t.src_rank == rank:
                    data = shard.payload[t.interval.as_slice(interval.start)]
                    yield simnet.Send(t.dst_rank, plan.label, data, mb, "fwd")

    def forward_dest(self, rank: int, mb: int) -> Iterator[Any]:
        """Dest side of a non-colocated forward: the leader concatenates, then broadcasts."""
        plan = self.plan
        j = plan.dst_dp_of(rank)
        block = plan.dst_blocks[j]
        interval = plan.dst_intervals[j]
        self._record(self._fwd_dst, rank, mb, interval)
        data = None
        if rank == block[0]:
            parts = []
            for t in plan.transfers:
                if t.dst_rank == rank:
                    parts.append((yield simnet.Recv(t.src_rank, plan.label, mb, "fwd")))
            data = np.concatenate(parts, axis=0)
        data = yield simnet.Broadcast(block, f"{plan.label}:bcast", root=block[0], payload=data, mb=mb, direction="fwd")
        return ShardedTensor(interval, data)

    def backward_dest(self, rank: int, grad: ShardedTensor, mb: int) -> Iterator:
        """Dest side of a non-colocated backward: reduce replicas at the leader and split back."""
        plan = self.plan
        interval = self._pop(self._fwd_dst, rank, mb)
        if grad.interval != interval or grad.feature_width != plan.edge.feature_width:
            raise GradIntervalMismatch(
                f"{plan.edge.label}: rank {rank} returned gradient {grad.interval}, forward produced {interval}"
            )
        j = plan.dst_dp_of(rank)
        block = plan.dst_blocks[j]
        if coord_of_rank(plan.edge.dest, rank).tp != 0:
            return  # TP peers hold the same all-reduced gradient as the tp=0 lane
        group = plan.replica_group(rank)
        total = grad.payload
        if len(group) > 1:
            total = yield simnet.Reduce(
                group, f"{plan.label}:reduce", root=block[0], payload=total, mb=mb, direction="bwd"
            )
        if rank == block[0]:
            for t in self._backward_pieces(j):
                yield simnet.Send(t.src_rank, plan.label, total[t.interval.as_slice(interval.start)], mb, "bwd")

    def backward_source(self, rank: int, mb: int) -> Iterator[Any]:
        """Source side of a non-colocated backward: the leader reassembles and broadcasts."""
        plan = self.plan
        interval = self._pop(self._fwd_src, rank, mb)
        i = plan.src_dp_of(rank)
        block = plan.src_blocks[i]
        data = None
        if rank == block[0]:
            parts = []
            for t in plan.transfers:
                if t.src_rank == rank:
                    parts.append((yield simnet.Recv(t.dst_rank, plan.label, mb, "bwd")))
            data = np.concatenate(parts, axis=0)
        data = yield simnet.Broadcast(block, f"{plan.label}:bcast", root=block[0], payload=data, mb=mb, direction="bwd")
        return ShardedTensor(interval, data)

    # -- colocated ------------------------------------------------------------

    def _gather(self, rank, actions, groups, own, mb, direction):
        """Run every gather group containing ``rank`` in plan order; return the rank's result."""
        width = self.plan.edge.feature_width
        result = None
        for g in groups:
            if rank not in g.members:
                continue
            piece = g.piece_of(rank)
            if piece is None:
                payload = np.zeros((0, width))
            else:
                payload = own.payload[piece.as_slice(own.interval.start)]
            out = yield simnet.AllGather(g.members, g.name, payload=payload, mb=mb, direction=direction)
            if rank in g.receivers:
                result = ShardedTensor(g.interval, out)
        action = actions.get(rank)
        if action is not None and action.kind in ("local", "select"):
            result = ShardedTensor(action.interval, own.payload[action.interval.as_slice(own.interval.start)])
        return result

    def colocated_forward(self, rank: int, shard: ShardedTensor | None, mb: int) -> Iterator[Any]:
        """Every rank of the shared set runs this; dest ranks get their view back, others ``None``."""
        plan = self.plan
        if rank in plan.source_ranks:
            interval = self._check_source(rank, shard)
            self._record(self._fwd_src, rank, mb, interval)
        result = yield from self._gather(rank, plan.fwd_actions, plan.fwd_groups, shard, mb, "fwd")
        if rank in plan.dest_ranks:
            self._record(self._fwd_dst, rank, mb, result.interval)
        return result

    def colocated_backward(self, rank: int, grad: ShardedTensor | None, mb: int) -> Iterator[Any]:
        """Every rank of the shared set runs this; source ranks get their gradient back."""
        plan = self.plan
        own = None
        if rank in plan.dest_ranks:
            interval = self._pop(self._fwd_dst, rank, mb)
            if grad is None or grad.interval != interval or grad.feature_width != plan.edge.feature_width:
                got = None if grad is None else grad.interval
                raise GradIntervalMismatch(
                    f"{plan.edge.label}: rank {rank} returned gradient {got}, forward produced {interval}"
                )
            group = plan.replica_group(rank)
            total = grad.payload
            if len(group) > 1:
                total = yield simnet.AllReduce(group, f"{plan.label}:replica", payload=total, mb=mb, direction="bwd")
            own = ShardedTensor(interval, total)
        if rank in plan.source_ranks:
            self._pop(self._fwd_src, rank, mb)
        result = yield from self._gather(rank, plan.bwd_actions, plan.bwd_groups, own, mb, "bwd")
        return result if rank in plan.source_ranks else None


def _run(fabric, programs):
    fabric = fabric if fabric is not None else simnet.Fabric()
    return fabric.run(programs)


def bridge_forward(
    bridge: Bridge,
    shards: Mapping[int, ShardedTensor],
    mb: int,
    fabric: simnet.Fabric | None = None,
) -> dict[int, ShardedTensor]:
    """Run one forward transform on its own and return the dest-layout shard of every dest rank."""
    plan = bridge.plan
    missing = [r for r in plan.source_ranks if r not in shards]
    if missing:
        raise MissingSourceShard(f"{plan.edge.label}: no shard supplied for source ranks {missing}")
    programs = {}
    if plan.placement is Placement.COLOCATED:
        for r in plan.edge.source.ranks:
            programs[r] = bridge.colocated_forward(r, shards.get(r), mb)
    else:
        def both(r):
            if r in plan.source_ranks:
                yield from bridge.forward_source(r, shards[r], mb)
            if r in plan.dest_ranks:
                return (yield from bridge.forward_dest(r, mb))
        for r in sorted(set(plan.source_ranks) | set(plan.dest_ranks)):
            programs[r] = both(r)
    out = _run(fabric, programs)
    return {r: out[r] for r in plan.dest_ranks}


def bridge_backward(
    bridge: Bridge,
    grads: Mapping[int, ShardedTensor],
    mb: int,
    fabric: simnet.Fabric | None = None,
) -> dict[int, ShardedTensor]:
    """Run one backward transform on its own and return the gradient of every source rank."""
    plan = bridge.plan
    programs = {}
    if plan.placement is Placement.COLOCATED:
        for r in plan.edge.source.ranks:
            programs[r] = bridge.colocated_backward(r, grads.get(r), mb)
    else:
        def both(r):
            if r in plan.dest_ranks:
                yield from bridge.backward_dest(r, grads[r], mb)
            if r in plan.source_ranks:
                return (yield from bridge.backward_source(r, mb))
        for r in sorted(set(plan.source_ranks) | set(plan.dest_ranks)):
            programs[r] = both(r)
    out = _run(fabric, programs)
    return {r: out[r] for r in plan.source_ranks}
