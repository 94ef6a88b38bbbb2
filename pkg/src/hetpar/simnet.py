"""Deterministic virtual-rank message fabric.

Rank programs are generators that yield fabric operations and receive the
operation's result back::

    def program(rank):
        yield Send(dst=1, label="act", payload=x)
        y = yield Recv(src=0, label="act")
        total = yield AllReduce(group=(0, 1), label="tp", payload=y)

Sends are eager (buffered), receives block until a message is present on the
``(src, dst, label)`` channel, and collectives block until every group member
has entered. Among runnable ranks the lowest rank id is always advanced by one
operation, so a configuration yields the same event trace on every run.
"""

from __future__ import annotations

import collections
from dataclasses import dataclass, field
from typing import Any, Generator, Iterable, Mapping

import numpy as np

ELEMENT_BYTES = 8

Program = Generator[Any, Any, Any]


class SimnetError(RuntimeError):
    pass


class Deadlock(SimnetError):
    def __init__(self, waiting: Mapping[int, str]):
        self.waiting = dict(waiting)
        detail = "; ".join(f"rank {r} waiting on {w}" for r, w in sorted(self.waiting.items()))
        super().__init__(f"deadlock: {detail}")


class GroupMismatch(SimnetError):
    pass


class ShapeMismatch(SimnetError):
    pass


class SnapshotWhileActive(SimnetError):
    pass


def _nbytes(payload: np.ndarray | None) -> int:
    return 0 if payload is None else int(payload.size) * ELEMENT_BYTES


@dataclass(frozen=True)
class Send:
    dst: int
    label: str
    payload: np.ndarray
    mb: int | None = None
    direction: str = ""


@dataclass(frozen=True)
class Recv:
    src: int
    label: str
    mb: int | None = None
    direction: str = ""


@dataclass(frozen=True)
class _Collective:
    group: tuple[int, ...]
    label: str

    kind = "collective"


@dataclass(frozen=True)
class Broadcast(_Collective):
    root: int = -1
    payload: np.ndarray | None = None
    mb: int | None = None
    direction: str = ""

    kind = "broadcast"


@dataclass(frozen=True)
class AllGather(_Collective):
    payload: np.ndarray | None = None
    mb: int | None = None
    direction: str = ""

    kind = "all_gather"


@dataclass(frozen=True)
class AllReduce(_Collective):
    payload: np.ndarray | None = None
    mb: int | None = None
    direction: str = ""

    kind = "all_reduce"


@dataclass(frozen=True)
class Reduce(_Collective):
    """Sum onto ``root``; other members get ``None`` back."""

    root: int = -1
    payload: np.ndarray | None = None
    mb: int | None = None
    direction: str = ""

    kind = "reduce"


@dataclass(frozen=True)
class Barrier(_Collective):
    mb: int | None = None
    direction: str = ""

    kind = "barrier"


@dataclass(frozen=True)
class Mark:
    """Trace-only annotation; never blocks and moves no data."""

    label: str
    mb: int | None = None


@dataclass(frozen=True)
class Event:
    seq: int
    rank: int
    event: str
    label: str
    peer: str
    mb: int | None
    nbytes: int

    def line(self) -> str:
        mb = "-" if self.mb is None else str(self.mb)
        return f"{self.seq} {self.rank} {self.event} {self.label} {self.peer} {mb} {self.nbytes}"


@dataclass
class LedgerEntry:
    messages: int = 0
    nbytes: int = 0


class TrafficLedger:
    """Message counts and byte volumes keyed by ``(label, direction)``."""

    def __init__(self) -> None:
        self.entries: dict[tuple[str, str], LedgerEntry] = {}
        self.channel_sent: dict[tuple[int, int, str], int] = collections.defaultdict(int)
        self.channel_received: dict[tuple[int, int, str], int] = collections.defaultdict(int)

    def add(self, label: str, direction: str, messages: int, nbytes: int) -> None:
        entry = self.entries.setdefault((label, direction), LedgerEntry())
        entry.messages += messages
        entry.nbytes += nbytes

    def get(self, label: str, direction: str = "") -> LedgerEntry:
        return self.entries.get((label, direction), LedgerEntry())

    def total(self, prefix: str = "", direction: str | None = None) -> LedgerEntry:
        out = LedgerEntry()
        for (label, d), e in self.entries.items():
            if label.startswith(prefix) and (direction is None or d == direction):
                out.messages += e.messages
                out.nbytes += e.nbytes
        return out

    def copy(self) -> TrafficLedger:
        other = TrafficLedger()
        other.entries = {k: LedgerEntry(v.messages, v.nbytes) for k, v in self.entries.items()}
        other.channel_sent = collections.defaultdict(int, self.channel_sent)
        other.channel_received = collections.defaultdict(int, self.channel_received)
        return other

    def __len__(self) -> int:
        return len(self.entries)


def _group_str(group: Iterable[int]) -> str:
    return "g[" + ",".join(str(r) for r in group) + "]"


@dataclass
class _Pending:
    """One in-flight collective instance."""

    op: _Collective
    entered: dict[int, _Collective] = field(default_factory=dict)
    results: dict[int, Any] | None = None
    exited: set[int] = field(default_factory=set)


@dataclass
class _RankState:
    program: Program
    op: Any = None
    resume: Any = None
    done: bool = False
    result: Any = None
    pending_key: tuple | None = None


class Fabric:
    """A world of virtual ranks sharing one trace and one traffic ledger.

    The ledger and trace accumulate across calls to :meth:`run`, so one fabric
    can host a whole multi-step experiment.
    """

    def __init__(self) -> None:
        self.ledger = TrafficLedger()
        self.trace: list[Event] = []
        self._channels: dict[tuple[int, int, str], collections.deque] = collections.defaultdict(
            collections.deque
        )
        self._collectives: dict[tuple, _Pending] = {}
        self._counts: dict[tuple, int] = collections.defaultdict(int)

    # -- public snapshots -------------------------------------------------

    def ledger_snapshot(self) -> TrafficLedger:
        if self._collectives:
            active = sorted(k[0] for k in self._collectives)
            raise SnapshotWhileActive(f"collectives in flight: {', '.join(active)}")
        return self.ledger.copy()

    def trace_export(self) -> str:
        return "".join(e.line() + "\n" for e in self.trace)

    # -- execution ------------------------------------------------------------

    def run(self, programs: Mapping[int, Program]) -> dict[int, Any]:
        """Drive ``programs`` (rank -> generator) to completion and return their results."""
        states = {rank: _RankState(program) for rank, program in sorted(programs.items())}
        order = sorted(states)
        while True:
            for rank in order:
                st = states[rank]
                if not st.done and self._runnable(rank, st):
                    self._advance(rank, st)
                    break
            else:
                waiting = {r: self._describe_wait(st) for r, st in states.items() if not st.done}
                if waiting:
                    self._collectives.clear()
                    raise Deadlock(waiting)
                return {r: st.result for r, st in states.items()}

    def _describe_wait(self, st: _RankState) -> str:
        op = st.op
        if isinstance(op, Recv):
            return f"recv from {op.src} label {op.label}"
        if isinstance(op, _Collective):
            return f"{op.kind} {op.label} {_group_str(op.group)}"
        return repr(op)

    def _runnable(self, rank: int, st: _RankState) -> bool:
        op = st.op
        if op is None:
            return True
        if isinstance(op, Recv):
            return bool(self._channels.get((op.src, rank, op.label)))
        if isinstance(op, _Collective):
            pending = self._collectives.get(st.pending_key)
            return pending is not None and pending.results is not None
        raise AssertionError(op)

    def _emit(self, rank: int, event: str, label: str, peer: str, mb: int | None, nbytes: int) -> None:
        self.trace.append(Event(len(self.trace), rank, event, label, peer, mb, nbytes))

    def _advance(self, rank: int, st: _RankState) -> None:
        op = st.op
        if op is None:
            try:
                op = st.program.send(st.resume)
            except StopIteration as stop:
                st.done, st.result = True, stop.value
                return
            st.resume = None
            st.op = op
            self._start(rank, st, op)
            return
        if isinstance(op, Recv):
            self._finish_recv(rank, st, op)
            return
        pending = self._collectives[st.pending_key]
        self._emit(rank, f"{op.kind}-exit", op.label, _group_str(op.group), op.mb, 0)
        st.resume = pending.results[rank]
        pending.exited.add(rank)
        if len(pending.exited) == len(op.group):
            del self._collectives[st.pending_key]
        st.op = st.pending_key = None

    def _start(self, rank: int, st: _RankState, op: Any) -> None:
        if isinstance(op, Send):
            if op.dst == rank:
                raise SimnetError(f"rank {rank} cannot send to itself ({op.label})")
            payload = np.array(op.payload, dtype=np.float64, copy=True)
            key = (rank, op.dst, op.label)
            self._channels[key].append(payload)
            nbytes = _nbytes(payload)
            self.ledger.add(op.label, op.direction, 1, nbytes)
            self.ledger.channel_sent[key] += nbytes
            self._emit(rank, "send", op.label, str(op.dst), op.mb, nbytes)
            st.op = None
        elif isinstance(op, Recv):
            if op.src == rank:
                raise SimnetError(f"rank {rank} cannot receive from itself ({op.label})")
            if self._channels.get((op.src, rank, op.label)):
                self._finish_recv(rank, st, op)
        elif isinstance(op, Mark):
            self._emit(rank, "mark", op.label, "-", op.mb, 0)
            st.op = None
        elif isinstance(op, _Collective):
            self._enter(rank, st, op)
        else:
            raise SimnetError(f"rank {rank} yielded unsupported operation {op!r}")

    def _finish_recv(self, rank: int, st: _RankState, op: Recv) -> None:
        key = (op.src, rank, op.label)
        payload = self._channels[key].popleft()
        nbytes = _nbytes(payload)
        self.ledger.channel_received[key] += nbytes
        self._emit(rank, "recv", op.label, str(op.src), op.mb, nbytes)
        st.resume = payload
        st.op = None

    def _enter(self, rank: int, st: _RankState, op: _Collective) -> None:
        group = tuple(op.group)
        if rank not in group:
            raise GroupMismatch(f"rank {rank} entered {op.label} but is not in {_group_str(group)}")
        if len(set(group)) != len(group):
            raise GroupMismatch(f"{op.label}: duplicate members in {_group_str(group)}")
        for key, pending in self._collectives.items():
            if key[0] == op.label and key[1] != group and rank in key[1]:
                raise GroupMismatch(
                    f"rank {rank} entered {op.label} with {_group_str(group)} while peers "
                    f"declared {_group_str(key[1])}"
                )
        count_key = (rank, op.label, group)
        seq = self._counts[count_key]
        self._counts[count_key] = seq + 1
        key = (op.label, group, seq)
        pending = self._collectives.setdefault(key, _Pending(op))
        if type(pending.op) is not type(op) or getattr(pending.op, "root", None) != getattr(op, "root", None):
            raise GroupMismatch(f"rank {rank} entered {op.kind} {op.label} but peers entered {pending.op.kind}")
        pending.entered[rank] = op
        st.pending_key = key
        self._emit(rank, f"{op.kind}-enter", op.label, _group_str(group), op.mb, _nbytes(getattr(op, "payload", None)))
        if len(pending.entered) == len(group):
            pending.results = self._complete(pending, group)

    def _complete(self, pending: _Pending, group: tuple[int, ...]) -> dict[int, Any]:
        op = pending.op
        n = len(group)
        ordered = [pending.entered[r] for r in group]
        if isinstance(op, Barrier):
            return {r: None for r in group}
        if isinstance(op, Broadcast):
            if op.root not in group:
                raise GroupMismatch(f"{op.label}: root {op.root} not in {_group_str(group)}")
            data = pending.entered[op.root].payload
            if data is None:
                raise ShapeMismatch(f"{op.label}: broadcast root {op.root} supplied no payload")
            data = np.array(data, dtype=np.float64, copy=True)
            self.ledger.add(op.label, op.direction, n - 1, (n - 1) * _nbytes(data))
            return {r: data.copy() for r in group}
        payloads = [np.asarray(o.payload, dtype=np.float64) for o in ordered]
        if isinstance(op, AllGather):
            widths = {p.shape[1:] for p in payloads}
            if len(widths) > 1:
                raise ShapeMismatch(f"{op.label}: all-gather pieces have trailing shapes {sorted(widths)}")
            data = np.concatenate(payloads, axis=0)
            self.ledger.add(op.label, op.direction, n * (n - 1), (n - 1) * sum(map(_nbytes, payloads)))
            return {r: data.copy() for r in group}
        shapes = {p.shape for p in payloads}
        if len(shapes) > 1:
            raise ShapeMismatch(f"{op.label}: reduction payload shapes differ: {sorted(shapes)}")
        total = payloads[0].copy()
        for p in payloads[1:]:
            total += p
        if isinstance(op, AllReduce):
            self.ledger.add(op.label, op.direction, n * (n - 1), (n - 1) * sum(map(_nbytes, payloads)))
            return {r: total.copy() for r in group}
        if isinstance(op, Reduce):
            if op.root not in group:
                raise GroupMismatch(f"{op.label}: root {op.root} not in {_group_str(group)}")
            self.ledger.add(op.label, op.direction, n - 1, (n - 1) * _nbytes(total))
            return {r: (total if r == op.root else None) for r in group}
        raise AssertionError(op)
