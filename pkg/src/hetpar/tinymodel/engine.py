"""Shard-wise training of the tiny model on the simulated fabric.

Each virtual rank keeps only the parameter shards of the stages it owns and
runs a program compiled from the schedule: the graph-aware 1F1B dispatch
table when every encoder -> LLM edge is non-colocated, or the three-phase
plan when every such edge is colocated.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterator, Mapping

import numpy as np

from hetpar import simnet
from hetpar.bridge import Bridge, ShardedTensor, plan_bridge
from hetpar.grid import (
    BoundaryEdge,
    GridCoord,
    ModuleLayout,
    Placement,
    coord_of_rank,
    dp_cp_group,
    partition_batch,
    rank_of_coord,
    stage_peer,
    tp_group,
)
from hetpar.sched import (
    BWD,
    FWD,
    P2P,
    RECV_BWD,
    RECV_FWD,
    SEND_BWD,
    SEND_FWD,
    DispatchTable,
    Op,
    PhasePlan,
    ScheduleConfig,
    ScheduleError,
    StageNode,
    build_stage_graph,
    generate_1f1b_dispatch,
    generate_three_phase,
    validate_dispatch,
)
from hetpar.tinymodel.model import (
    ModelError,
    ParamInfo,
    ParamShard,
    TinyModelSpec,
    TrainBatch,
    assemble_param,
    assemble_tokens,
    check_layouts,
    column_backward,
    column_forward,
    init_params,
    is_trainable,
    llm_stage_layers,
    loss_and_grad,
    param_infos,
    row_backward,
    row_forward,
    shard_param,
    split_vision_grad,
    stage_of,
)

log = logging.getLogger(__name__)


class ReplicaDivergence(RuntimeError):
    pass


@dataclass
class StepResult:
    loss: float
    params: dict[str, np.ndarray]
    grads: dict[str, np.ndarray]


@dataclass
class _Role:
    """One (module, stage) this rank works on, with its per-microbatch buffers."""

    module: str
    layout: ModuleLayout
    coord: GridCoord
    shards: dict[str, ParamShard]
    inputs: dict[int, np.ndarray] = field(default_factory=dict)
    vision: dict[int, dict[str, np.ndarray]] = field(default_factory=dict)
    saved: dict[int, list] = field(default_factory=dict)
    outputs: dict[int, np.ndarray] = field(default_factory=dict)
    grad_out: dict[int, np.ndarray] = field(default_factory=dict)
    grad_in: dict[int, np.ndarray] = field(default_factory=dict)
    accum: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def node(self) -> StageNode:
        return StageNode(self.module, self.coord.pp)

    def add_grad(self, name: str, g: np.ndarray) -> None:
        if name in self.accum:
            self.accum[name] += g
        else:
            self.accum[name] = g.copy()

    def reset(self) -> None:
        for buf in (self.inputs, self.vision, self.saved, self.outputs, self.grad_out, self.grad_in, self.accum):
            buf.clear()


class DistributedTrainer:
    """Runs training steps of the tiny model under per-module layouts."""

    def __init__(
        self,
        spec: TinyModelSpec,
        layouts: Mapping[str, ModuleLayout],
        batch: TrainBatch,
        num_microbatches: int = 1,
        seed: int = 0,
        trainable: Mapping[str, bool] | None = None,
        fabric: simnet.Fabric | None = None,
        offload: bool = True,
    ):
        check_layouts(spec, layouts)
        self.spec = spec
        self.layouts = {name: layouts[name] for name in (*spec.encoders, spec.llm)}
        self.batch = batch
        self.nmb = num_microbatches
        self.trainable = dict(trainable or {})
        self.fabric = fabric if fabric is not None else simnet.Fabric()
        self.offload = offload
        if batch.size % num_microbatches:
            raise ModelError(f"global batch {batch.size} not divisible into {num_microbatches} microbatches")
        self.mb_size = batch.size // num_microbatches
        self.loss_scale = 1.0 / (batch.size * spec.tokens_per_sample * spec.d_h)
        self.infos = {i.name: i for i in param_infos(spec)}

        llm = self.layouts[spec.llm]
        self.bridges: dict[str, Bridge] = {}
        placements = set()
        for enc in spec.encoders:
            edge = BoundaryEdge(self.layouts[enc], llm, self.mb_size, spec.vision_width)
            plan = plan_bridge(edge)
            placements.add(plan.placement)
            self.bridges[enc] = Bridge(plan)
        if len(placements) != 1:
            raise ScheduleError("mixing colocated and non-colocated encoder -> LLM edges is not supported")
        self.placement = placements.pop()

        edges = tuple((enc, spec.llm) for enc in spec.encoders)
        self.schedule_config = ScheduleConfig(num_microbatches, self.layouts, edges)
        self.graph = build_stage_graph(list(self.layouts.values()), edges)
        if self.placement is Placement.NON_COLOCATED:
            self.table: DispatchTable = generate_1f1b_dispatch(self.graph, self.schedule_config)
            violations = validate_dispatch(self.table, self.graph)
            self.phase_plan: PhasePlan | None = None
        else:
            self.phase_plan = generate_three_phase(self.schedule_config, edges, spec.llm, offload=offload)
            self.table = self.phase_plan.phase2
            violations = validate_dispatch(self.phase_plan, self.graph)
        if violations:
            raise ScheduleError("generated schedule is invalid: " + "; ".join(map(str, violations)))

        full = init_params(spec, seed)
        self.roles: dict[int, list[_Role]] = {}
        for name, lay in self.layouts.items():
            infos = [i for i in self.infos.values() if i.module == name]
            for rank in lay.ranks:
                c = coord_of_rank(lay, rank)
                shards = {
                    i.name: shard_param(i, full[i.name], lay.tp, c.tp)
                    for i in infos
                    if stage_of(spec, i, lay.pp) == c.pp
                }
                self.roles.setdefault(rank, []).append(_Role(name, lay, c, shards))
        self.world = sorted(self.roles)
        self.steps_done = 0

    # -- driver ----------------------------------------------------------------

    def step(self) -> StepResult:
        colocated = self.placement is Placement.COLOCATED
        program = self._colocated_program if colocated else self._pipeline_program
        results = self.fabric.run({r: program(r) for r in self.world})
        self.steps_done += 1
        loss = sum(res["loss"] for res in results.values())
        grads = {}
        for name, info in self.infos.items():
            if is_trainable(name, self.trainable):
                grads[name] = self._assemble(info, lambda role, n=name: results_grad(results, role, n))
        params = self.assembled_params()
        return StepResult(loss, params, grads)

    def assembled_params(self, check: bool = True) -> dict[str, np.ndarray]:
        if check:
            self.check_replicas()
        return {name: self._assemble(info, lambda role, n=name: role.shards[n].values) for name, info in self.infos.items()}

    def set_params(self, full: Mapping[str, np.ndarray]) -> None:
        """Replace every shard with the matching slice of ``full`` (e.g. a loaded checkpoint)."""
        if set(full) != set(self.infos):
            raise ModelError(f"parameter set mismatch: {sorted(set(full) ^ set(self.infos))}")
        for rank in self.world:
            for role in self.roles[rank]:
                for name in role.shards:
                    values = np.asarray(full[name], dtype=float)
                    role.shards[name] = shard_param(self.infos[name], values, role.layout.tp, role.coord.tp)

    def _assemble(self, info: ParamInfo, pick) -> np.ndarray:
        lay = self.layouts[info.module]
        stage = stage_of(self.spec, info, lay.pp)
        shards = []
        for rank in lay.ranks:
            role = self._role(rank, info.module)
            if role.coord.pp == stage and role.coord.dp == 0 and role.coord.cp == 0:
                shards.append(ParamShard(info.name, lay.tp, role.coord.tp, slice(None), slice(None), pick(role)))
        return assemble_param(info, shards)

    def _role(self, rank: int, module: str) -> _Role:
        for role in self.roles[rank]:
            if role.module == module:
                return role
        raise KeyError((rank, module))

    def check_replicas(self) -> None:
        """DP/CP replicas of every parameter slice must be bit-identical."""
        seen: dict[tuple[str, int], np.ndarray] = {}
        for rank in self.world:
            for role in self.roles[rank]:
                for name, shard in role.shards.items():
                    key = (name, role.coord.tp)
                    if key in seen and not np.array_equal(seen[key], shard.values):
                        raise ReplicaDivergence(f"{name} tp={role.coord.tp} differs on rank {rank}")
                    seen.setdefault(key, shard.values)

    # -- helpers used inside rank programs --------------------------------------

    def _rows(self, mb: int, dp: int, dp_idx: int) -> slice:
        iv = partition_batch(self.mb_size, dp)[dp_idx]
        base = mb * self.mb_size
        return slice(base + iv.start, base + iv.stop)

    def _allreduce(self, group, label, data, mb=None, direction=""):
        if len(group) == 1:
            return data
        return (yield simnet.AllReduce(tuple(group), label, payload=data, mb=mb, direction=direction))

    def _train(self, name: str) -> bool:
        return is_trainable(name, self.trainable)

    # -- encoder stages --------------------------------------------------------

    def _encoder_forward(self, role: _Role, mb: int, x: np.ndarray | None) -> Iterator:
        """Forward of the encoder layers this stage owns; ``x`` is data or the stage input."""
        spec, lay = self.spec, role.layout
        enc_name, proj_name = f"{role.module}.encoder", f"{role.module}.projector"
        saved = {}
        h = x
        if enc_name in role.shards:
            _, z = column_forward(h, role.shards[enc_name].values, spec.activation)
            saved["x"], saved["z"] = h, z
            h = z
        if proj_name in role.shards:
            saved["zin"] = h
            part = row_forward(h, role.shards[proj_name].values)
            h = yield from self._allreduce(tp_group(lay, self._rank_of(role)), f"{role.module}:tp", part, mb, "fwd")
        role.saved[mb] = saved
        return h

    def _encoder_backward(self, role: _Role, mb: int, dy: np.ndarray) -> np.ndarray | None:
        spec = self.spec
        enc_name, proj_name = f"{role.module}.encoder", f"{role.module}.projector"
        saved = role.saved.pop(mb)
        d = dy
        if proj_name in role.shards:
            dw, d = row_backward(saved["zin"], d, role.shards[proj_name].values)
            if self._train(proj_name):
                role.add_grad(proj_name, dw)
        if enc_name in role.shards:
            if self._train(enc_name):
                dw, _ = column_backward(saved["x"], saved["z"], d, role.shards[enc_name].values, spec.activation, need_dx=False)
                role.add_grad(enc_name, dw)
            return None
        return d

    # -- LLM stages ----------------------------------------------------------------

    def _llm_layers(self, role: _Role) -> range:
        return llm_stage_layers(self.spec, role.layout.pp)[role.coord.pp]

    def _llm_forward(self, role: _Role, mb: int, x: np.ndarray) -> Iterator:
        spec, lay = self.spec, role.layout
        rank = self._rank_of(role)
        group = tp_group(lay, rank)
        lead = x.shape[:-1]
        h = x.reshape(-1, spec.d_h)
        saved = []
        for layer in self._llm_layers(role):
            w1 = role.shards[f"{spec.llm}.layer{layer}.fc1"].values
            w2 = role.shards[f"{spec.llm}.layer{layer}.fc2"].values
            _, z = column_forward(h, w1, spec.activation)
            saved.append((h, z))
            h = yield from self._allreduce(group, f"{spec.llm}:tp", row_forward(z, w2), mb, "fwd")
        role.saved[mb] = saved
        return h.reshape(*lead, spec.d_h)

    def _llm_backward(self, role: _Role, mb: int, dy: np.ndarray) -> Iterator:
        """Input gradient of the stage, all-reduced over TP so every TP peer holds it."""
        spec, lay = self.spec, role.layout
        rank = self._rank_of(role)
        group = tp_group(lay, rank)
        lead = dy.shape[:-1]
        d = dy.reshape(-1, spec.d_h)
        saved = role.saved.pop(mb)
        layers = list(self._llm_layers(role))
        for k in reversed(range(len(layers))):
            layer = layers[k]
            h, z = saved[k]
            n1, n2 = f"{spec.llm}.layer{layer}.fc1", f"{spec.llm}.layer{layer}.fc2"
            dw2, dz = row_backward(z, d, role.shards[n2].values)
            dw1, dx = column_backward(h, z, dz, role.shards[n1].values, spec.activation)
            if self._train(n2):
                role.add_grad(n2, dw2)
            if self._train(n1):
                role.add_grad(n1, dw1)
            d = yield from self._allreduce(group, f"{spec.llm}:tp", dx, mb, "bwd")
        return d.reshape(*lead, spec.d_h)

    def _stage0_input(self, role: _Role, mb: int, vision: Mapping[str, np.ndarray]) -> np.ndarray:
        c, lay = role.coord, role.layout
        text = self.batch.text[self._rows(mb, lay.dp, c.dp)]
        return assemble_tokens(self.spec, vision, text, lay.cp, c.cp)

    def _loss(self, role: _Role, mb: int, out: np.ndarray) -> float:
        spec, c, lay = self.spec, role.coord, role.layout
        n = spec.tokens_per_sample // lay.cp
        target = self.batch.target[self._rows(mb, lay.dp, c.dp), c.cp * n : (c.cp + 1) * n]
        loss, grad = loss_and_grad(out, target, self.loss_scale)
        role.grad_out[mb] = grad
        return loss if c.tp == 0 else 0.0

    # -- rank programs -------------------------------------------------------------

    def _rank_of(self, role: _Role) -> int:
        return rank_of_coord(role.layout, role.coord)

    def _exec(self, rank: int, role: _Role, op: Op, result: dict) -> Iterator:
        spec = self.spec
        mb = op.mb
        is_llm = role.module == spec.llm
        lay, c = role.layout, role.coord
        if op.kind == RECV_FWD:
            if op.edge.kind == P2P:
                role.inputs[mb] = yield simnet.Recv(stage_peer(lay, rank, c.pp - 1), f"p2p:{op.edge}", mb, "fwd")
            else:
                enc = op.edge.src.module
                view = yield from self.bridges[enc].forward_dest(rank, mb)
                role.vision.setdefault(mb, {})[enc] = view.payload
        elif op.kind == FWD:
            if is_llm:
                x = self._stage0_input(role, mb, role.vision.pop(mb)) if c.pp == 0 else role.inputs.pop(mb)
                out = yield from self._llm_forward(role, mb, x)
                if c.pp == lay.pp - 1:
                    result["loss"] += self._loss(role, mb, out)
                else:
                    role.outputs[mb] = out
            else:
                x = self.batch.encoder_inputs[role.module][self._rows(mb, lay.dp, c.dp)] if c.pp == 0 else role.inputs.pop(mb)
                role.outputs[mb] = yield from self._encoder_forward(role, mb, x)
        elif op.kind == SEND_FWD:
            out = role.outputs.pop(mb)
            if op.edge.kind == P2P:
                yield simnet.Send(stage_peer(lay, rank, c.pp + 1), f"p2p:{op.edge}", out, mb, "fwd")
            else:
                bridge = self.bridges[role.module]
                iv = bridge.plan.src_intervals[c.dp]
                yield from bridge.forward_source(rank, ShardedTensor(iv, out), mb)
        elif op.kind == RECV_BWD:
            if op.edge.kind == P2P:
                role.grad_out[mb] = yield simnet.Recv(stage_peer(lay, rank, c.pp + 1), f"p2p:{op.edge}", mb, "bwd")
            else:
                g = yield from self.bridges[role.module].backward_source(rank, mb)
                role.grad_out[mb] = g.payload
        elif op.kind == BWD:
            dy = role.grad_out.pop(mb)
            if is_llm:
                role.grad_in[mb] = yield from self._llm_backward(role, mb, dy)
            else:
                role.grad_in[mb] = self._encoder_backward(role, mb, dy)
        elif op.kind == SEND_BWD:
            if op.edge.kind == P2P:
                yield simnet.Send(stage_peer(lay, rank, c.pp - 1), f"p2p:{op.edge}", role.grad_in.pop(mb), mb, "bwd")
            else:
                # grad_in stays: a join returns one slice of it over each incoming edge
                enc = op.edge.src.module
                vg = split_vision_grad(spec, role.grad_in[mb], lay.cp, c.cp)[enc]
                bridge = self.bridges[enc]
                iv = bridge.plan.dst_intervals[c.dp]
                yield from bridge.backward_dest(rank, ShardedTensor(iv, vg), mb)
        else:
            raise AssertionError(op)

    def _run_table(self, rank: int, roles: list[_Role], table: DispatchTable, result: dict, marks=None) -> Iterator:
        by_node = {role.node: role for role in roles}
        for t, row in enumerate(table.rows):
            for node in table.columns:
                role = by_node.get(node)
                if role is None or node not in row:
                    continue
                if marks and marks.get(node) == t:
                    yield simnet.Mark("offload:reload")
                for op in row[node]:
                    yield from self._exec(rank, role, op, result)

    def _sync_and_update(self, rank: int, roles: list[_Role], result: dict) -> Iterator:
        lr = self.spec.learning_rate
        for role in roles:
            group = dp_cp_group(role.layout, rank)
            for name, shard in role.shards.items():
                if not self._train(name):
                    continue
                g = role.accum.get(name)
                if g is None:
                    g = np.zeros_like(shard.values)
                g = yield from self._allreduce(group, f"{role.module}:dpsync", g, None, "bwd")
                result["grads"][(role.module, name)] = g
                shard.values -= lr * g

    def _new_result(self) -> dict:
        return {"loss": 0.0, "grads": {}}

    def _pipeline_program(self, rank: int) -> Iterator:
        roles = self.roles[rank]
        for role in roles:
            role.reset()
        result = self._new_result()
        yield from self._run_table(rank, roles, self.table, result)
        yield from self._sync_and_update(rank, roles, result)
        return self._finish(rank, result)

    def _colocated_program(self, rank: int) -> Iterator:
        spec = self.spec
        plan = self.phase_plan
        roles = self.roles[rank]
        for role in roles:
            role.reset()
        result = self._new_result()
        enc_roles = [r for r in roles if r.module != spec.llm]
        llm_roles = [r for r in roles if r.module == spec.llm]
        everyone = tuple(self.world)

        # Phase 1: encoder forward once over the window, then the forward transform.
        yield simnet.Mark("phase1:begin")
        for role in enc_roles:
            lay, c = role.layout, role.coord
            x = np.concatenate(
                [self.batch.encoder_inputs[role.module][self._rows(m, lay.dp, c.dp)] for m in range(self.nmb)]
            )
            role.outputs[-1] = yield from self._encoder_forward(role, -1, x)
        views: dict[int, dict[str, np.ndarray]] = {}
        for step in plan.phase1:
            if step.kind != "bridge_forward":
                continue
            enc = step.edge.split("->")[0]
            bridge = self.bridges[enc]
            shard = None
            role = next((r for r in enc_roles if r.module == enc), None)
            if role is not None and rank in bridge.plan.source_ranks:
                n = bridge.plan.src_intervals[role.coord.dp].length
                iv = bridge.plan.src_intervals[role.coord.dp]
                shard = ShardedTensor(iv, role.outputs[-1][step.mb * n : (step.mb + 1) * n])
            view = yield from bridge.colocated_forward(rank, shard, step.mb)
            if view is not None:
                views.setdefault(step.mb, {})[enc] = view.payload
        yield simnet.Mark("phase1:end")
        # The barriers make the offload marks land after every rank's phase 1 and before any phase 3.
        yield simnet.Barrier(everyone, "sched:phase-sync")
        if plan.offload:
            yield simnet.Mark("offload:unload")

        # Phase 2: detached LLM pipeline over per-microbatch views of the packed tensor.
        yield simnet.Mark("phase2:begin")
        for role in llm_roles:
            if role.coord.pp == 0:
                for m, v in views.items():
                    role.vision[m] = dict(v)
        for role in llm_roles:
            role.grad_in.clear()
        packed_grads: dict[int, np.ndarray] = {}
        stage0 = [r for r in llm_roles if r.coord.pp == 0]
        yield from self._run_table(
            rank, llm_roles, plan.phase2, result, marks=plan.reload_rows if plan.offload else None
        )
        for role in stage0:
            packed_grads.update(role.grad_in)
            role.grad_in.clear()
        yield simnet.Mark("phase2:end")
        if plan.offload:
            yield simnet.Mark("offload:sync")
        yield simnet.Barrier(everyone, "sched:phase-sync")

        # Phase 3: hand boundary gradients to the backward transform, then encoder backward.
        yield simnet.Mark("phase3:begin")
        enc_grads: dict[str, dict[int, np.ndarray]] = {}
        for step in plan.phase3:
            if step.kind == "handoff":
                yield simnet.Mark(f"handoff:{step.edge}")
            elif step.kind == "bridge_backward":
                enc = step.edge.split("->")[0]
                bridge = self.bridges[enc]
                grad = None
                if rank in bridge.plan.dest_ranks:
                    role = stage0[0]
                    vg = split_vision_grad(spec, packed_grads[step.mb], role.layout.cp, role.coord.cp)[enc]
                    grad = ShardedTensor(bridge.plan.dst_intervals[role.coord.dp], vg)
                g = yield from bridge.colocated_backward(rank, grad, step.mb)
                if g is not None:
                    enc_grads.setdefault(enc, {})[step.mb] = g.payload
            elif step.kind == "encoder_backward":
                for role in enc_roles:
                    if role.module == step.module:
                        dy = np.concatenate([enc_grads[role.module][m] for m in range(self.nmb)])
                        self._encoder_backward(role, -1, dy)
        yield from self._sync_and_update(rank, roles, result)
        return self._finish(rank, result)

    def _finish(self, rank: int, result: dict) -> dict:
        for role in self.roles[rank]:
            pending = [k for k, v in vars(role).items() if isinstance(v, dict) and k not in ("shards", "accum") and v]
            if pending:
                log.debug("rank %d role %s left buffers %s", rank, role.node, pending)
        return {"loss": result["loss"], "grads": result["grads"]}


def results_grad(results: Mapping[int, dict], role: _Role, name: str) -> np.ndarray:
    rank = rank_of_coord(role.layout, role.coord)
    return results[rank]["grads"][(role.module, name)]
