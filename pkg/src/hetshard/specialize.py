"""Per-device graph specialization, pipeline construction and micro-batch schedules.

The graph splits into three sections:

* ``pre``: nodes with no Placeholder ancestor (parameter-side work such as
  weight re-sharding), executed once before any micro-batch;
* ``mb``: the per-micro-batch path, executed once per scheduled run on the
  devices of one pipeline;
* ``post``: CommOps explicitly flagged ``once`` on the data path plus
  everything downstream (e.g. gradient sync); their micro-batch inputs are
  accumulated by summation and they run once after all micro-batches.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Mapping, Sequence

from .annotation import HetAnnotation, check
from .errors import (
    ConflictingStageOrder,
    ScheduleError,
    ShardingError,
    SpecializeError,
    SymbolBindingError,
)
from .graph import CompGraph, OpNode
from .resolve import BSR, COLLECTIVES, SEND_RECV, CommPlan, classify
from .symbolic import bind_shape

PRE, MB, POST = "pre", "mb", "post"


# ---------------------------------------------------------------------------
# sections


def _has_placeholder(graph: CompGraph, node: OpNode) -> bool:
    if node.kind == "placeholder":
        return True
    return any(graph.nodes[a].kind == "placeholder" for a in graph.ancestors(node.id))


def is_once(graph: CompGraph, node: OpNode) -> bool:
    """Whether a CommOp runs once per step rather than once per micro-batch."""
    if "once" in node.attrs:
        return bool(node.attrs["once"])
    return not _has_placeholder(graph, node)


def sections(graph: CompGraph) -> dict[int, str]:
    out: dict[int, str] = {}
    for node in graph.topo_order():
        if not _has_placeholder(graph, node):
            out[node.id] = PRE
            continue
        parents = [graph.tensors[t].producer for t in node.inputs]
        if (node.is_comm and node.attrs.get("once")) or any(out[p] == POST for p in parents):
            out[node.id] = POST
        else:
            out[node.id] = MB
    return out


def batch_dims(graph: CompGraph, tensor: str, batch_symbol: str) -> list[int]:
    return [i for i, d in enumerate(graph.tensors[tensor].shape) if batch_symbol in d.symbols]


# ---------------------------------------------------------------------------
# restriction to one pipeline


def restrict(anno: HetAnnotation, devices, batch: Sequence[int] = ()) -> HetAnnotation | None:
    """Keep the subgroups that lie inside ``devices``; None when none do."""
    devices = set(devices)
    kept = []
    for g, group in enumerate(anno.dg_union):
        inside = [d in devices for d in group]
        if all(inside):
            kept.append(g)
        elif any(inside):
            raise SpecializeError(f"subgroup {list(group)} straddles the pipeline {sorted(devices)}")
    if not kept:
        return None
    if len(kept) == anno.hsize:
        return anno
    ratios = None
    if anno.hdim >= 0:
        if anno.hdim not in batch:
            raise SpecializeError(f"hdim {anno.hdim} is not a batch dimension; cannot split the tensor by pipeline")
        if anno.hsplit_ratios is not None and len(kept) > 1:
            part = [anno.hsplit_ratios[g] for g in kept]
            total = sum(part, Fraction(0))
            ratios = tuple(r / total for r in part)
    return HetAnnotation(
        tuple(anno.dg_union[g] for g in kept), tuple(anno.ds_union[g] for g in kept), anno.hdim, None, ratios
    )


# ---------------------------------------------------------------------------
# context and instantiation


@dataclass
class Context:
    """Annotations, concrete shapes and CommOp plans for one execution scope."""

    strategy: int
    annotations: dict[str, HetAnnotation]
    shapes: dict[str, tuple[int, ...]]
    nodes: list[int]
    plans: dict[int, CommPlan]
    section: str | None = None


def _require_deduced(graph: CompGraph, strategy: int) -> None:
    if strategy not in graph.deduced:
        raise SpecializeError(f"strategy {strategy} has not been deduced")


def build_context(
    graph: CompGraph,
    strategy: int,
    bindings: Mapping[str, int] | None = None,
    *,
    devices=None,
    section: str | None = None,
    batch_symbol: str = "B",
    bandwidth=None,
    itemsize: int = 8,
) -> Context:
    """Resolve every CommOp in scope.  ``devices`` restricts annotations to one pipeline."""
    _require_deduced(graph, strategy)
    shapes = graph.bind_symbols(bindings or {})
    secs = sections(graph)
    nodes = [n.id for n in graph.topo_order() if section is None or secs[n.id] == section]
    annos: dict[str, HetAnnotation] = {}
    for nid in nodes:
        node = graph.nodes[nid]
        for t in [*node.inputs, node.output]:
            if t in annos:
                continue
            a = graph.tensors[t].annotations[strategy]
            if devices is not None:
                a = restrict(a, devices, batch_dims(graph, t, batch_symbol))
            if a is None:
                continue
            try:
                check(a, shapes[t])
            except ShardingError as e:
                e.tensor = t
                raise
            annos[t] = a
    nodes = [nid for nid in nodes if graph.nodes[nid].output in annos]
    plans: dict[int, CommPlan] = {}
    for nid in nodes:
        node = graph.nodes[nid]
        if node.is_comm:
            src = annos.get(node.inputs[0])
            if src is None:
                raise SpecializeError(f"CommOp {nid} input is not placed in this scope", node=nid)
            try:
                plans[nid] = classify(src, annos[node.output], shapes[node.output], bandwidth=bandwidth, itemsize=itemsize)
            except ShardingError as e:
                e.node = nid
                e.op = e.op or "classify"
                raise
    return Context(strategy, annos, {t: shapes[t] for t in annos}, nodes, plans, section)


@dataclass(frozen=True)
class ExecItem:
    kind: str  # leaf | compute | comm | finalize
    node: int
    phase: int = 0
    step: int = 0

    @property
    def key(self) -> tuple[int, int, int]:
        return (self.node, self.phase, self.step)

    def to_json(self) -> dict:
        out = {"kind": self.kind, "node": self.node}
        if self.kind in ("comm", "finalize"):
            out["phase"] = self.phase
        if self.kind == "comm":
            out["step"] = self.step
        return out


@dataclass
class ExecGraph:
    device: int
    items: list[ExecItem]
    context: Context = field(repr=False)

    @property
    def nodes(self) -> list[int]:
        return list(dict.fromkeys(i.node for i in self.items))

    def comm_steps(self):
        """(node id, CommStep) for every communication step this device joins."""
        for it in self.items:
            if it.kind == "comm":
                yield it.node, self.context.plans[it.node].phases[it.phase][it.step]

    def to_json(self, graph: CompGraph) -> dict:
        entries = []
        for it in self.items:
            e = it.to_json()
            node = graph.nodes[it.node]
            e["op"] = node.describe()
            e["output"] = node.output
            if it.kind == "comm":
                step = self.context.plans[it.node].phases[it.phase][it.step]
                e["step"] = step.to_json()
            entries.append(e)
        return {"version": "v1", "kind": "exec_graph", "device": self.device, "strategy": self.context.strategy,
                "items": entries}


def instantiate(
    graph: CompGraph,
    strategy: int,
    device: int,
    bindings: Mapping[str, int] | None = None,
    context: Context | None = None,
) -> ExecGraph:
    """The executable graph of one device: non-local nodes pruned, CommOps replaced by their steps."""
    ctx = context or build_context(graph, strategy, bindings)
    items: list[ExecItem] = []
    for nid in ctx.nodes:
        node = graph.nodes[nid]
        out = ctx.annotations[node.output]
        if node.is_comm:
            plan = ctx.plans[nid]
            for p, steps in enumerate(plan.phases):
                for s, step in enumerate(steps):
                    if device in step.devices:
                        items.append(ExecItem("comm", nid, p, s))
                if device in plan.annotations[p + 1].devices:
                    items.append(ExecItem("finalize", nid, p))
        elif device in out.devices:
            items.append(ExecItem("leaf" if node.is_leaf else "compute", nid))
    return ExecGraph(device, items, ctx)


def participating_devices(ctx: Context) -> list[int]:
    out: set[int] = set()
    for a in ctx.annotations.values():
        out.update(a.devices)
    for plan in ctx.plans.values():
        for step in plan.steps:
            out.update(step.devices)
    return sorted(out)


def instantiate_all(graph: CompGraph, ctx: Context) -> dict[int, ExecGraph]:
    return {d: instantiate(graph, ctx.strategy, d, context=ctx) for d in participating_devices(ctx)}


# ---------------------------------------------------------------------------
# pipelines


@dataclass
class Pipeline:
    stages: list[tuple[int, ...]]

    @property
    def devices(self) -> list[int]:
        return sorted(d for s in self.stages for d in s)

    def to_json(self) -> dict:
        return {"stages": [list(s) for s in self.stages]}


class _Stages:
    def __init__(self, devices):
        self.pid = {d: d for d in devices}
        self.stage = {d: 0 for d in devices}

    def members(self, pid):
        return [d for d, p in self.pid.items() if p == pid]

    def _merge(self, keep, other, offset):
        for d in self.members(other):
            self.pid[d] = keep
            self.stage[d] += offset
        lo = min(self.stage[d] for d in self.members(keep))
        for d in self.members(keep):
            self.stage[d] -= lo

    def same_stage(self, a, b, node):
        if self.pid[a] == self.pid[b]:
            if self.stage[a] != self.stage[b]:
                raise ConflictingStageOrder(
                    f"devices {a} and {b} share a collective but sit in stages {self.stage[a]} and {self.stage[b]}",
                    node=node,
                )
            return
        self._merge(self.pid[a], self.pid[b], self.stage[a] - self.stage[b])

    def after(self, s, r, node):
        if self.pid[s] == self.pid[r]:
            if self.stage[r] < self.stage[s]:
                raise ConflictingStageOrder(f"device {r} receives from later stage device {s}", node=node)
            return
        self._merge(self.pid[s], self.pid[r], self.stage[s] + 1 - self.stage[r])

    def pipelines(self) -> list[Pipeline]:
        out = []
        for pid in sorted(set(self.pid.values())):
            devs = self.members(pid)
            depth = max(self.stage[d] for d in devs) + 1
            stages = [tuple(sorted(d for d in devs if self.stage[d] == k)) for k in range(depth)]
            out.append(Pipeline([s for s in stages if s]))
        return sorted(out, key=lambda p: p.devices[0])


def construct_pipelines(
    graph: CompGraph, strategy: int, bindings: Mapping[str, int] | None = None, *, bandwidth=None
) -> list[Pipeline]:
    """Merge collective participants into one stage and append P2P receivers as the next stage.

    Devices of one subgroup always share a stage: a subgroup cannot be split
    across pipelines when annotations are restricted.
    """
    ctx = build_context(graph, strategy, bindings, section=MB, bandwidth=bandwidth)
    devices = set()
    for a in ctx.annotations.values():
        devices.update(a.devices)
    b = _Stages(sorted(devices))
    for a in ctx.annotations.values():
        for grp in a.dg_union:
            for m in grp.devices[1:]:
                b.same_stage(grp.devices[0], m, None)
    for nid in ctx.nodes:
        node = graph.nodes[nid]
        if not node.is_comm or is_once(graph, node):
            continue
        for step in ctx.plans[nid].steps:
            if step.kind in COLLECTIVES:
                for g in step.groups:
                    for m in g.members[1:]:
                        b.same_stage(g.members[0], m, nid)
            elif step.kind == SEND_RECV:
                for s, r in step.pairs:
                    if s != r:
                        b.after(s, r, nid)
            elif step.kind == BSR and step.bsr is not None:
                for t in step.bsr.transfers:
                    b.after(t.sender, t.receiver, nid)
    return b.pipelines()


# ---------------------------------------------------------------------------
# schedule


@dataclass(frozen=True)
class Run:
    pipeline: int
    micro_batch: int
    size: int
    offset: int
    bindings: dict

    def to_json(self) -> dict:
        return {"pipeline": self.pipeline, "micro_batch": self.micro_batch, "size": self.size,
                "offset": self.offset, "bindings": dict(self.bindings)}


@dataclass
class Schedule:
    pipelines: list[Pipeline]
    runs: list[Run]
    bindings: dict
    batch_symbol: str = "B"

    def to_json(self) -> dict:
        return {"version": "v1", "kind": "schedule", "batch_symbol": self.batch_symbol,
                "bindings": dict(self.bindings), "pipelines": [p.to_json() for p in self.pipelines],
                "runs": [r.to_json() for r in self.runs]}


def assign_schedule(
    graph: CompGraph,
    pipelines: Sequence[Pipeline],
    counts: Sequence[int],
    sizes,
    *,
    batch_symbol: str = "B",
    bindings: Mapping[str, int] | None = None,
) -> Schedule:
    """In-order schedule: each pipeline runs its micro-batches one after another.

    ``sizes`` is one int for every micro-batch, or one entry per pipeline that
    is either an int or a list with one size per micro-batch.  Data is handed
    out contiguously in pipeline order, then micro-batch order.
    """
    if len(counts) != len(pipelines):
        raise ScheduleError(f"{len(counts)} counts for {len(pipelines)} pipelines")
    if isinstance(sizes, int):
        sizes = [sizes] * len(pipelines)
    if len(sizes) != len(pipelines):
        raise ScheduleError(f"{len(sizes)} size entries for {len(pipelines)} pipelines")
    base = dict(bindings or {})
    runs: list[Run] = []
    offset = 0
    for p, (count, size) in enumerate(zip(counts, sizes)):
        if count < 1:
            raise ScheduleError(f"pipeline {p} needs at least one micro-batch, got {count}")
        per_mb = [size] * count if isinstance(size, int) else list(size)
        if len(per_mb) != count:
            raise ScheduleError(f"pipeline {p}: {len(per_mb)} sizes for {count} micro-batches")
        for j, b in enumerate(per_mb):
            run_bindings = {**base, batch_symbol: int(b)}
            try:
                for t in graph.tensors.values():
                    bind_shape(t.shape, run_bindings)
            except ShardingError as e:
                raise SymbolBindingError(
                    f"pipeline {p} micro-batch {j}: {batch_symbol}={b} is invalid ({e.code}: {e.message})",
                    tensor=e.tensor,
                ) from e
            runs.append(Run(p, j, int(b), offset, run_bindings))
            offset += int(b)
    total = {**base, batch_symbol: offset}
    if batch_symbol in base and base[batch_symbol] != offset:
        raise ScheduleError(f"micro-batch sizes add up to {offset}, but {batch_symbol}={base[batch_symbol]}")
    return Schedule(list(pipelines), runs, total, batch_symbol)
