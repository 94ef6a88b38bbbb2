"""Pipeline orchestration over a graph of independently parallelized modules.

The module graph is expanded into PP-stage nodes. Non-colocated training runs
a graph-aware 1F1B: each node warms up with as many forwards as its longest
distance to the loss-bearing sink, then alternates forward/backward, then
drains. Every communication action names the stage edge it travels on, so a
join consumes all of its encoder inputs and each gradient returns over the
edge that carried its activation.

Colocated training instead runs three phases: encoder forward plus the
colocated forward transform for the whole microbatch window, a detached
LLM-only 1F1B, then the gradient handoff, colocated backward transform and
encoder backward.
"""

from __future__ import annotations

import graphlib
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterator, Mapping, Sequence

from hetpar.grid import BoundaryEdge, ModuleLayout, Placement, placement_of_edge

P2P, NC, CO = "p2p", "NC", "CO"

FWD, BWD = "F", "B"
SEND_FWD, RECV_FWD, SEND_BWD, RECV_BWD = "sf", "rf", "sb", "rb"


class ScheduleError(ValueError):
    pass


class CyclicGraph(ScheduleError):
    pass


class DanglingEdge(ScheduleError):
    pass


class InfeasibleSchedule(ScheduleError):
    pass


class NotColocated(ScheduleError):
    pass


@dataclass(frozen=True, order=True)
class StageNode:
    module: str
    pp: int

    def __str__(self) -> str:
        return f"{self.module}P{self.pp}"


@dataclass(frozen=True)
class StageEdge:
    src: StageNode
    dst: StageNode
    kind: str  # P2P inside a module, NC or CO across a module boundary
    boundary: str | None = None  # "<src module>-><dst module>" for boundary edges

    def __str__(self) -> str:
        return f"{self.src}->{self.dst}"


@dataclass
class StageGraph:
    nodes: tuple[StageNode, ...]
    edges: tuple[StageEdge, ...]
    sink: StageNode
    distance: dict[StageNode, int]

    def in_edges(self, node: StageNode) -> list[StageEdge]:
        return [e for e in self.edges if e.dst == node]

    def out_edges(self, node: StageNode) -> list[StageEdge]:
        return [e for e in self.edges if e.src == node]

    def boundary_edges(self) -> list[StageEdge]:
        return [e for e in self.edges if e.boundary is not None]


@dataclass(frozen=True)
class ScheduleConfig:
    num_microbatches: int
    layouts: Mapping[str, ModuleLayout]
    edges: tuple[tuple[str, str], ...]

    def __post_init__(self) -> None:
        if self.num_microbatches < 1:
            raise InfeasibleSchedule(f"num_microbatches must be >= 1, got {self.num_microbatches}")


def _edge_kind(src: ModuleLayout, dst: ModuleLayout) -> str:
    placement = placement_of_edge(BoundaryEdge(src, dst, 1, 1))
    return CO if placement is Placement.COLOCATED else NC


def build_stage_graph(
    modules: Sequence[ModuleLayout], edges: Sequence[tuple[str, str]]
) -> StageGraph:
    """Expand modules into PP-stage nodes and attach boundary edges last-stage -> first-stage."""
    by_name = {m.name: m for m in modules}
    if len(by_name) != len(modules):
        raise ScheduleError("duplicate module names")
    sorter: graphlib.TopologicalSorter = graphlib.TopologicalSorter()
    for name in by_name:
        sorter.add(name)
    for src, dst in edges:
        for end in (src, dst):
            if end not in by_name:
                raise DanglingEdge(f"edge {src}->{dst} references undeclared module {end!r}")
        sorter.add(dst, src)
    try:
        sorter.prepare()
    except graphlib.CycleError as exc:
        raise CyclicGraph(f"module graph has a cycle: {exc.args[1]}") from None

    nodes = tuple(StageNode(m.name, p) for m in modules for p in range(m.pp))
    stage_edges = []
    for m in modules:
        for p in range(m.pp - 1):
            stage_edges.append(StageEdge(StageNode(m.name, p), StageNode(m.name, p + 1), P2P))
    for src, dst in edges:
        a, b = by_name[src], by_name[dst]
        stage_edges.append(
            StageEdge(StageNode(src, a.pp - 1), StageNode(dst, 0), _edge_kind(a, b), f"{src}->{dst}")
        )
    sinks = [n for n in nodes if not any(e.src == n for e in stage_edges)]
    if len(sinks) != 1:
        raise ScheduleError(f"stage graph needs exactly one sink, found {[str(s) for s in sinks]}")
    sink = sinks[0]

    distance: dict[StageNode, int] = {}
    order = _topological(nodes, stage_edges)
    for node in reversed(order):
        outs = [distance[e.dst] + 1 for e in stage_edges if e.src == node]
        distance[node] = max(outs, default=0)
    return StageGraph(nodes, tuple(stage_edges), sink, distance)


def _topological(nodes, edges) -> list[StageNode]:
    sorter: graphlib.TopologicalSorter = graphlib.TopologicalSorter()
    for n in nodes:
        sorter.add(n)
    for e in edges:
        sorter.add(e.dst, e.src)
    return list(sorter.static_order())


# -- dispatch tables ---------------------------------------------------------


@dataclass(frozen=True)
class Op:
    kind: str  # F, B, sf, rf, sb, rb
    mb: int
    edge: StageEdge | None = None

    @property
    def is_comm(self) -> bool:
        return self.edge is not None

    def short(self, detail: bool = False) -> str:
        if self.edge is None:
            return f"{self.kind}{self.mb}"
        return f"{self.kind}:{self.edge.kind}" + (f":{self.mb}" if detail else "")


@dataclass
class DispatchTable:
    columns: tuple[StageNode, ...]
    rows: list[dict[StageNode, tuple[Op, ...]]]
    num_microbatches: int

    def cells(self, node: StageNode) -> Iterator[tuple[int, Op]]:
        for i, row in enumerate(self.rows):
            for op in row.get(node, ()):
                yield i, op

    def phase_of_row(self) -> list[str]:
        """Label each row warmup (no backward yet), cooldown (no forward left) or steady."""
        labels = []
        seen_b = False
        f_left = sum(1 for row in self.rows for ops in row.values() for op in ops if op.kind == FWD)
        for row in self.rows:
            kinds = [op.kind for ops in row.values() for op in ops]
            seen_b = seen_b or BWD in kinds
            if not seen_b:
                labels.append("warmup")
            elif f_left:
                labels.append("steady")
            else:
                labels.append("cooldown")
            f_left -= kinds.count(FWD)
        return labels


def node_sequence(distance: int, nmb: int) -> list[tuple[str, int]]:
    """1F1B action order for a node whose warmup depth is ``distance``."""
    warm = min(distance, nmb)
    seq = [(FWD, m) for m in range(warm)]
    for k in range(nmb - warm):
        seq.append((FWD, warm + k))
        seq.append((BWD, k))
    seq.extend((BWD, m) for m in range(nmb - warm, nmb))
    return seq


def generate_1f1b_dispatch(graph: StageGraph, cfg: ScheduleConfig | int) -> DispatchTable:
    """Simulate schedule calls in lockstep; a node runs its next action once its inputs arrived."""
    nmb = cfg if isinstance(cfg, int) else cfg.num_microbatches
    if nmb < 1:
        raise InfeasibleSchedule(f"num_microbatches must be >= 1, got {nmb}")
    seqs = {n: node_sequence(graph.distance[n], nmb) for n in graph.nodes}
    pos = {n: 0 for n in graph.nodes}
    done: dict[tuple[str, StageNode, int], int] = {}
    ins = {n: graph.in_edges(n) for n in graph.nodes}
    outs = {n: graph.out_edges(n) for n in graph.nodes}
    rows: list[dict[StageNode, tuple[Op, ...]]] = []
    while any(pos[n] < len(seqs[n]) for n in graph.nodes):
        t = len(rows)
        row: dict[StageNode, tuple[Op, ...]] = {}
        for n in graph.nodes:
            if pos[n] == len(seqs[n]):
                continue
            kind, mb = seqs[n][pos[n]]
            if kind == FWD:
                ready = all(done.get((FWD, e.src, mb), t) < t for e in ins[n])
                ops = [Op(RECV_FWD, mb, e) for e in ins[n]] + [Op(FWD, mb)] + [Op(SEND_FWD, mb, e) for e in outs[n]]
            else:
                deps = [(BWD, e.dst, mb) for e in outs[n]] or [(FWD, n, mb)]
                ready = all(done.get(d, t) < t for d in deps)
                ops = [Op(RECV_BWD, mb, e) for e in outs[n]] + [Op(BWD, mb)] + [Op(SEND_BWD, mb, e) for e in ins[n]]
            if ready:
                row[n] = tuple(ops)
        if not row:
            raise InfeasibleSchedule("schedule made no progress")
        for n, ops in row.items():
            kind, mb = seqs[n][pos[n]]
            done[(kind, n, mb)] = t
            pos[n] += 1
        rows.append(row)
    return DispatchTable(graph.nodes, rows, nmb)


# -- validation ----------------------------------------------------------------


@dataclass(frozen=True)
class Violation:
    rule: str  # join-readiness, edge-identity, double-consumption, send-order, completeness
    node: str
    edge: str | None
    mb: int | None
    message: str

    def __str__(self) -> str:
        return f"{self.rule}: {self.message}"


def validate_dispatch(table: DispatchTable | PhasePlan, graph: StageGraph) -> list[Violation]:
    """Check readiness, edge identity and single consumption; returns violations, never raises."""
    if isinstance(table, PhasePlan):
        return _validate_phases(table, graph)
    out: list[Violation] = []
    sent: dict[tuple[str, StageEdge, int], int] = {}
    recv_fwd: dict[tuple[StageNode, StageEdge, int], int] = {}
    returned: set[tuple[StageEdge, int]] = set()
    recv_bwd: set[tuple[StageEdge, int]] = set()
    computed: set[tuple[str, StageNode, int]] = set()
    edges = set(graph.edges)

    def bad(rule, node, edge, mb, msg):
        out.append(Violation(rule, str(node), None if edge is None else str(edge), mb, msg))

    for t, row in enumerate(table.rows):
        for node in table.columns:
            for op in row.get(node, ()):
                e, mb = op.edge, op.mb
                if e is not None and e not in edges:
                    bad("edge-identity", node, e, mb, f"{node} uses {e}, which is not a graph edge")
                    continue
                if op.kind == SEND_FWD:
                    if e.src != node:
                        bad("edge-identity", node, e, mb, f"{node} sends forward on {e} it does not own")
                    if (FWD, node, mb) not in computed:
                        bad("send-order", node, e, mb, f"{node} sends mb {mb} on {e} before computing it")
                    if (SEND_FWD, e, mb) in sent:
                        bad("double-consumption", node, e, mb, f"forward of mb {mb} sent twice on {e}")
                    sent[(SEND_FWD, e, mb)] = t
                elif op.kind == RECV_FWD:
                    if e.dst != node:
                        bad("edge-identity", node, e, mb, f"{node} receives forward on {e} it does not end")
                    if sent.get((SEND_FWD, e, mb), t) >= t:
                        bad("send-order", node, e, mb, f"{node} receives mb {mb} on {e} before it was sent")
                    if (node, e, mb) in recv_fwd:
                        bad("double-consumption", node, e, mb, f"forward of mb {mb} consumed twice on {e}")
                    recv_fwd[(node, e, mb)] = t
                elif op.kind == FWD:
                    for ie in graph.in_edges(node):
                        if (node, ie, mb) not in recv_fwd:
                            bad(
                                "join-readiness", node, ie, mb,
                                f"{node} computes mb {mb} before receiving its input on {ie}",
                            )
                    computed.add((FWD, node, mb))
                elif op.kind == RECV_BWD:
                    if e.src != node:
                        bad("edge-identity", node, e, mb, f"{node} receives a gradient on {e} it did not send on")
                    elif (SEND_FWD, e, mb) not in sent:
                        bad("edge-identity", node, e, mb, f"{node} receives a gradient of mb {mb} on {e} with no forward")
                    if sent.get((SEND_BWD, e, mb), t) >= t:
                        bad("send-order", node, e, mb, f"{node} receives gradient of mb {mb} on {e} before it was sent")
                    if (e, mb) in recv_bwd:
                        bad("double-consumption", node, e, mb, f"gradient of mb {mb} consumed twice on {e}")
                    recv_bwd.add((e, mb))
                elif op.kind == BWD:
                    if (FWD, node, mb) not in computed:
                        bad("send-order", node, None, mb, f"{node} runs backward of mb {mb} before forward")
                    for oe in graph.out_edges(node):
                        if (oe, mb) not in recv_bwd:
                            bad(
                                "join-readiness", node, oe, mb,
                                f"{node} runs backward of mb {mb} before its gradient arrived on {oe}",
                            )
                    computed.add((BWD, node, mb))
                elif op.kind == SEND_BWD:
                    if (node, e, mb) not in recv_fwd:
                        bad(
                            "edge-identity", node, e, mb,
                            f"{node} returns the gradient of mb {mb} over {e}, which did not carry its activation",
                        )
                    if (e, mb) in returned:
                        bad("double-consumption", node, e, mb, f"gradient of mb {mb} returned twice over {e}")
                    if (BWD, node, mb) not in computed:
                        bad("send-order", node, e, mb, f"{node} sends gradient of mb {mb} before its backward")
                    returned.add((e, mb))
                    sent[(SEND_BWD, e, mb)] = t
    for e in graph.edges:
        for mb in range(table.num_microbatches):
            if (SEND_FWD, e, mb) not in sent or (e.dst, e, mb) not in recv_fwd:
                bad("completeness", e.dst, e, mb, f"forward of mb {mb} never crosses {e}")
            elif (e, mb) not in returned:
                bad("edge-identity", e.dst, e, mb, f"activation of mb {mb} on {e} never gets its gradient back over {e}")
            elif (e, mb) not in recv_bwd:
                bad("completeness", e.src, e, mb, f"gradient of mb {mb} on {e} is never received")
    for n in graph.nodes:
        for mb in range(table.num_microbatches):
            for kind in (FWD, BWD):
                if (kind, n, mb) not in computed:
                    bad("completeness", n, None, mb, f"{n} never runs {kind}{mb}")
    return out


# -- three-phase colocated schedule ------------------------------------------


@dataclass(frozen=True)
class PhaseStep:
    kind: str  # encoder_forward, bridge_forward, handoff, bridge_backward, encoder_backward
    module: str | None = None
    edge: str | None = None
    mb: int | None = None

    def __str__(self) -> str:
        parts = [self.kind]
        if self.module is not None:
            parts.append(self.module)
        if self.edge is not None:
            parts.append(self.edge)
        if self.mb is not None:
            parts.append(f"mb{self.mb}")
        return " ".join(parts)


@dataclass
class PhasePlan:
    phase1: tuple[PhaseStep, ...]
    llm_graph: StageGraph
    phase2: DispatchTable
    phase3: tuple[PhaseStep, ...]
    offload: bool = False
    # Row of the phase-2 table at which each LLM node starts its cooldown (reload point).
    reload_rows: dict[StageNode, int] = field(default_factory=dict)


def cooldown_row(table: DispatchTable, node: StageNode) -> int:
    """First row after the node's last forward; the node only runs backwards from there."""
    last_f = max((t for t, op in table.cells(node) if op.kind == FWD), default=-1)
    return min((t for t, op in table.cells(node) if op.kind == BWD and t > last_f), default=len(table.rows))


def generate_three_phase(
    cfg: ScheduleConfig, colocated: Sequence[tuple[str, str]], llm: str, offload: bool = True
) -> PhasePlan:
    nmb = cfg.num_microbatches
    encoders: list[str] = []
    for src, dst in colocated:
        if dst != llm:
            raise ScheduleError(f"colocated edge {src}->{dst} does not end at the LLM {llm!r}")
        if _edge_kind(cfg.layouts[src], cfg.layouts[dst]) != CO:
            raise NotColocated(f"edge {src}->{dst} does not share one rank set")
        if cfg.layouts[src].pp != 1:
            raise ScheduleError(f"colocated encoder {src} must use pp=1")
        if src not in encoders:
            encoders.append(src)
    phase1 = [PhaseStep("encoder_forward", module=e) for e in encoders]
    phase1 += [PhaseStep("bridge_forward", edge=f"{s}->{d}", mb=m) for s, d in colocated for m in range(nmb)]
    llm_graph = build_stage_graph([cfg.layouts[llm]], [])
    table = generate_1f1b_dispatch(llm_graph, nmb)
    phase3 = [PhaseStep("handoff", edge=f"{s}->{d}") for s, d in colocated]
    phase3 += [PhaseStep("bridge_backward", edge=f"{s}->{d}", mb=m) for s, d in colocated for m in range(nmb)]
    phase3 += [PhaseStep("encoder_backward", module=e) for e in encoders]
    reload_rows = {n: cooldown_row(table, n) for n in llm_graph.nodes} if offload else {}
    return PhasePlan(tuple(phase1), llm_graph, table, tuple(phase3), offload, reload_rows)


def _validate_phases(plan: PhasePlan, graph: StageGraph) -> list[Violation]:
    out = validate_dispatch(plan.phase2, plan.llm_graph)
    kinds1 = [s.kind for s in plan.phase1]
    kinds3 = [s.kind for s in plan.phase3]
    if any(k not in ("encoder_forward", "bridge_forward") for k in kinds1):
        out.append(Violation("phase-order", "-", None, None, "phase 1 holds steps other than encoder/bridge forward"))
    if any(k not in ("handoff", "bridge_backward", "encoder_backward") for k in kinds3):
        out.append(Violation("phase-order", "-", None, None, "phase 3 holds steps other than handoff/backward"))
    if kinds3 and kinds3[0] != "handoff":
        out.append(Violation("phase-order", "-", None, None, "phase 3 must start with the gradient handoff"))
    last_bwd = max((i for i, k in enumerate(kinds3) if k == "bridge_backward"), default=-1)
    first_enc = min((i for i, k in enumerate(kinds3) if k == "encoder_backward"), default=len(kinds3))
    if last_bwd > first_enc:
        out.append(Violation("phase-order", "-", None, None, "encoder backward runs before the backward transform"))
    fwd = {(s.edge, s.mb) for s in plan.phase1 if s.kind == "bridge_forward"}
    bwd = [(s.edge, s.mb) for s in plan.phase3 if s.kind == "bridge_backward"]
    for key in bwd:
        if key not in fwd:
            out.append(Violation("edge-identity", "-", key[0], key[1], f"backward transform of {key} has no forward"))
    if len(set(bwd)) != len(bwd):
        out.append(Violation("double-consumption", "-", None, None, "a backward transform runs twice"))
    for key in fwd - set(bwd):
        out.append(Violation("completeness", "-", key[0], key[1], f"forward transform {key} never gets its gradient"))
    for e in graph.boundary_edges():
        if e.kind != CO:
            out.append(Violation("placement", str(e.dst), str(e), None, f"{e} is not colocated"))
    return out


# -- rendering -----------------------------------------------------------------


def render_dispatch(table: DispatchTable, detail: bool = False) -> str:
    """Text grid: one row per schedule call, one column per stage node.

    By default a cell lists the communicator of each communication action
    (``rf``/``sf`` receive/send forward, ``rb``/``sb`` receive/send backward);
    ``detail`` adds microbatch ids and compute actions.
    """
    headers = ["call", "phase"] + [str(c) for c in table.columns]
    phases = table.phase_of_row()
    body = []
    for t, row in enumerate(table.rows):
        cells = [str(t), phases[t]]
        for node in table.columns:
            ops = row.get(node, ())
            shown = [op.short(detail) for op in ops if detail or op.is_comm]
            cells.append(" ".join(shown))
        body.append(cells)
    widths = [max([len(h)] + [len(r[i]) for r in body]) for i, h in enumerate(headers)]
    fmt = lambda cells: " | ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()  # noqa: E731
    lines = [fmt(headers), "-+-".join("-" * w for w in widths)]
    lines += [fmt(r) for r in body]
    return "\n".join(lines) + "\n"


def render_phase_plan(plan: PhasePlan) -> str:
    lines = ["phase 1: encoder forward + colocated forward transform"]
    lines += [f"  {s}" for s in plan.phase1]
    if plan.offload:
        lines.append("  [offload] unload encoder parameters")
    lines.append("phase 2: detached LLM 1F1B")
    for line in render_dispatch(plan.phase2, detail=True).splitlines():
        lines.append("  " + line)
    if plan.offload:
        for node, row in sorted(plan.reload_rows.items()):
            lines.append(f"  [offload] {node} starts encoder reload at call {row}")
        lines.append("  [offload] synchronize reload before phase 3")
    lines.append("phase 3: gradient handoff + colocated backward transform + encoder backward")
    lines += [f"  {s}" for s in plan.phase3]
    return "\n".join(lines) + "\n"


def edge_index(graph: StageGraph) -> dict[str, list[StageEdge]]:
    """Boundary stage edges grouped by module-level edge label."""
    out: dict[str, list[StageEdge]] = defaultdict(list)
    for e in graph.boundary_edges():
        out[e.boundary].append(e)
    return dict(out)
