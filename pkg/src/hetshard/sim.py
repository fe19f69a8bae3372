"""Deterministic virtual cluster.

Devices hold shards (a region of the logical tensor plus a dense payload).
Communication steps run as instantaneous rendezvous: a step fires once every
participant is waiting on it.  Reductions always add contributions in
ascending device id, so float results are reproducible bit for bit.
"""

from __future__ import annotations

import json
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .annotation import HetAnnotation, SliceRegion, placement, top_bounds
from .errors import (
    DeadlockDetected,
    MissingShard,
    ReplicaDivergence,
    ShapeMismatch,
    SimulationError,
    UnsupportedOp,
)
from .graph import CompGraph, OpNode
from .resolve import BSR, COLLECTIVES, IDENTITY, SEND_RECV, CommPlan, CommStep

# ---------------------------------------------------------------------------
# cluster


def default_bandwidth(node_of: Mapping[int, int], intra: float = 100.0, inter: float = 10.0) -> np.ndarray:
    """Two-tier matrix: ``intra`` within a node, ``inter`` across nodes."""
    n = max(node_of) + 1 if node_of else 0
    bw = np.full((n, n), inter, dtype=float)
    for a in node_of:
        for b in node_of:
            if node_of[a] == node_of[b]:
                bw[a, b] = intra
    return bw


@dataclass
class VirtualCluster:
    devices: tuple[int, ...]
    node_of: dict[int, int]
    bandwidth: np.ndarray
    itemsize: int = 8

    def __post_init__(self):
        self.devices = tuple(sorted(int(d) for d in self.devices))
        missing = [d for d in self.devices if d not in self.node_of]
        if missing:
            raise SimulationError(f"devices {missing} have no node")
        self.bandwidth = np.asarray(self.bandwidth, dtype=float)
        if (self.bandwidth <= 0).any():
            raise SimulationError("bandwidth must be positive")

    @classmethod
    def uniform(cls, n: int, devices_per_node: int = 8, intra: float = 100.0, inter: float = 10.0) -> VirtualCluster:
        node_of = {d: d // devices_per_node for d in range(n)}
        return cls(tuple(range(n)), node_of, default_bandwidth(node_of, intra, inter))

    def to_json(self) -> dict:
        return {
            "version": "v1",
            "devices": list(self.devices),
            "node_of": {str(d): n for d, n in self.node_of.items()},
            "bandwidth": self.bandwidth.tolist(),
            "itemsize": self.itemsize,
        }

    @classmethod
    def from_json(cls, data: Mapping) -> VirtualCluster:
        node_of = {int(d): int(n) for d, n in data["node_of"].items()}
        devices = tuple(data.get("devices", sorted(node_of)))
        if data.get("bandwidth") is not None:
            bw = np.asarray(data["bandwidth"], dtype=float)
        else:
            bw = default_bandwidth(node_of, float(data.get("intra", 100.0)), float(data.get("inter", 10.0)))
        return cls(devices, node_of, bw, int(data.get("itemsize", 8)))


# ---------------------------------------------------------------------------
# device state


@dataclass
class Shard:
    region: SliceRegion
    data: np.ndarray

    def cut(self, box: SliceRegion) -> np.ndarray:
        if not self.region.contains(box):
            raise MissingShard(f"shard {self.region} does not cover {box}")
        return self.data[box.slices(self.region)]


class _Assembly:
    def __init__(self, region: SliceRegion, dtype):
        self.region = region
        self.buffer = np.zeros(region.shape, dtype=dtype)
        self.mask = np.zeros(region.shape, dtype=bool)

    def put(self, box: SliceRegion, data: np.ndarray) -> None:
        idx = box.slices(self.region)
        if self.buffer[idx].shape != data.shape:
            raise ShapeMismatch(f"piece {box} has payload shape {data.shape}")
        self.buffer[idx] = data
        self.mask[idx] = True


@dataclass
class DeviceState:
    device: int
    store: dict[str, Shard] = field(default_factory=dict)
    sent: Counter = field(default_factory=Counter)  # receiver -> bytes
    pending: dict[str, _Assembly] = field(default_factory=dict)

    def get(self, key: str) -> Shard:
        try:
            return self.store[key]
        except KeyError:
            raise MissingShard(f"device {self.device} holds no shard of {key!r}", tensor=key) from None

    def receive(self, key: str, region: SliceRegion, box: SliceRegion, data: np.ndarray) -> None:
        asm = self.pending.get(key)
        if asm is None:
            asm = self.pending[key] = _Assembly(region, data.dtype)
        asm.put(box, data)

    def finalize(self, key: str, region: SliceRegion, dtype=np.float64) -> None:
        asm = self.pending.pop(key, None)
        if asm is None:
            if region.size == 0:
                self.store[key] = Shard(region, np.zeros(region.shape, dtype=dtype))
                return
            raise MissingShard(f"device {self.device} received nothing for {key!r}", tensor=key)
        if not asm.mask.all():
            raise MissingShard(f"device {self.device} is missing part of {region} for {key!r}", tensor=key)
        self.store[key] = Shard(region, asm.buffer)

    def copy(self) -> DeviceState:
        return DeviceState(self.device, {k: Shard(v.region, v.data.copy()) for k, v in self.store.items()},
                           Counter(self.sent))


def traffic_log(states: Mapping[int, DeviceState]) -> dict[tuple[int, int], int]:
    out = {}
    for d, st in sorted(states.items()):
        for r, n in sorted(st.sent.items()):
            out[(d, r)] = n
    return out


# ---------------------------------------------------------------------------
# scatter / reassemble


def _addends(value: np.ndarray, n: int, rng: np.random.Generator | None) -> list[np.ndarray]:
    """``n`` arrays summing to ``value``; the first one absorbs the remainder."""
    parts = []
    for _ in range(n - 1):
        if rng is None:
            parts.append(np.zeros_like(value))
        elif np.issubdtype(value.dtype, np.integer):
            parts.append(rng.integers(-9, 10, size=value.shape).astype(value.dtype))
        else:
            parts.append(rng.standard_normal(value.shape).astype(value.dtype))
    rest = value - sum(parts) if parts else value
    return [np.asarray(rest, dtype=value.dtype)] + parts


def _top_partial(anno: HetAnnotation) -> bool:
    return anno.hsize > 1 and anno.hdim == -2


def scatter(anno: HetAnnotation, value: np.ndarray, rng: np.random.Generator | None = None) -> dict[int, np.ndarray]:
    """Per-device shards of ``value``.

    Partial ordinal 0 carries the value and the others zeros, unless ``rng``
    is given, in which case the value is split into random addends.  Bottom
    Partials under a non-Partial top tier sum within their own subgroup.
    """
    value = np.asarray(value)
    shape = value.shape
    regions = {d: placement(anno, shape, d) for d in anno.devices}
    if _top_partial(anno):
        total = sum(anno.partial_counts())
        split = {None: _addends(value, total, rng)}
    else:
        split = {g: _addends(value, s.count(-2), rng) for g, s in enumerate(anno.ds_union)}
    out = {}
    for d, region in regions.items():
        parts = split[None] if _top_partial(anno) else split[anno.locate(d)[0]]
        out[d] = np.array(parts[region.partial or 0][region.slices()], copy=True)
    return out


def _top_region(anno: HetAnnotation, shape: tuple[int, ...], g: int) -> SliceRegion:
    bounds = [(0, n) for n in shape]
    if anno.hsize > 1 and anno.hdim >= 0:
        bounds[anno.hdim] = tuple(top_bounds(anno, shape[anno.hdim])[g])
    return SliceRegion(tuple(bounds))


def _replicas_agree(a: np.ndarray, b: np.ndarray) -> bool:
    # replicas reduced by different groups may differ by round-off
    if np.issubdtype(a.dtype, np.inexact):
        return bool(np.allclose(a, b, rtol=1e-9, atol=1e-12))
    return bool(np.array_equal(a, b))


def _place(buffers: dict, key, region: SliceRegion, data: np.ndarray, shape, who: str) -> None:
    if key not in buffers:
        buffers[key] = (np.zeros(shape, dtype=data.dtype), np.zeros(shape, dtype=bool))
    buf, mask = buffers[key]
    idx = region.slices()
    seen = mask[idx]
    if seen.any() and not _replicas_agree(buf[idx][seen], data[seen]):
        raise ReplicaDivergence(f"{who} disagrees with an earlier replica on {region}")
    buf[idx] = data
    mask[idx] = True


def reassemble(anno: HetAnnotation, shards: Mapping[int, np.ndarray], shape: Sequence[int]) -> np.ndarray:
    """Logical tensor from per-device shards (Splits placed, Duplicates checked, Partials summed)."""
    shape = tuple(int(n) for n in shape)
    per_group: dict[int, dict] = {}
    for d in sorted(anno.devices):
        if d not in shards:
            raise MissingShard(f"no shard for device {d}")
        region = placement(anno, shape, d)
        data = np.asarray(shards[d])
        if data.shape != region.shape:
            raise ShapeMismatch(f"device {d}: shard shape {data.shape} != region shape {region.shape}")
        g = anno.locate(d)[0]
        _place(per_group.setdefault(g, {}), region.partial or 0, region, data, shape, f"device {d}")
    # sum each subgroup's partial addends over its own region
    values = {}
    for g, buffers in sorted(per_group.items()):
        top = _top_region(anno, shape, g)
        idx = top.slices()
        acc = None
        for key in sorted(buffers):
            buf, mask = buffers[key]
            if not mask[idx].all():
                raise MissingShard(f"partial ordinal {key} does not cover subgroup {g}")
            acc = buf[idx] if acc is None else acc + buf[idx]
        values[g] = (top, acc)
    if _top_partial(anno):
        total = None
        for g in sorted(values):
            total = values[g][1] if total is None else total + values[g][1]
        return total
    merged: dict = {}
    for g in sorted(values):
        top, acc = values[g]
        _place(merged, 0, top, acc, shape, f"subgroup {g}")
    buf, mask = merged[0]
    if not mask.all():
        raise MissingShard("subgroups do not cover the tensor")
    return buf


# ---------------------------------------------------------------------------
# kernels and oracle


def gelu(x):
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x ** 3)))


ELEMENTWISE_KERNELS: dict[str, Callable] = {
    "gelu": lambda x, **_: gelu(x),
    "relu": lambda x, **_: np.maximum(x, 0),
    "neg": lambda x, **_: -x,
    "scale": lambda x, factor=1, **_: x * factor,
    "add": lambda a, b, **_: a + b,
    "mul": lambda a, b, **_: a * b,
}


def apply_op(node: OpNode, args: Sequence[np.ndarray], out_shape: Sequence[int] | None = None) -> np.ndarray:
    """Evaluate one non-leaf, non-comm node on (local or logical) arrays."""
    if node.kind == "elementwise":
        fn = ELEMENTWISE_KERNELS.get(node.attrs["fn"])
        if fn is None:
            raise UnsupportedOp(f"no kernel for {node.attrs['fn']}", node=node.id)
        extra = {k: v for k, v in node.attrs.items() if k != "fn"}
        return fn(*args, **extra)
    if node.kind == "dot":
        x, w = args
        if x.shape[-1] != w.shape[0]:
            raise ShapeMismatch(f"dot: {x.shape} x {w.shape}", node=node.id)
        return np.matmul(x, w)
    if node.kind == "sum":
        return np.sum(args[0], axis=node.attrs["axis"])
    if node.kind == "reshape":
        if out_shape is None:
            raise UnsupportedOp("reshape needs a concrete target shape", node=node.id)
        if math.prod(out_shape) != args[0].size:
            raise ShapeMismatch(f"reshape {args[0].shape} -> {tuple(out_shape)}", node=node.id)
        return args[0].reshape(tuple(out_shape))
    if node.kind == "comm":
        return args[0]
    raise UnsupportedOp(f"no kernel for {node.kind}", node=node.id)


def oracle_run(graph: CompGraph, inputs: Mapping[str, np.ndarray], bindings: Mapping[str, int] | None = None) -> dict[str, np.ndarray]:
    """Single-device reference evaluation; ``inputs`` maps every leaf tensor to its value."""
    shapes = graph.bind_symbols(bindings or {})
    values: dict[str, np.ndarray] = {}
    for node in graph.topo_order():
        out = node.output
        if node.is_leaf:
            if out not in inputs:
                raise SimulationError(f"no value for leaf {out!r}", node=node.id, tensor=out)
            v = np.asarray(inputs[out])
            if v.shape != shapes[out]:
                raise ShapeMismatch(f"leaf {out!r}: got {v.shape}, expected {shapes[out]}", tensor=out)
            values[out] = v
            continue
        values[out] = apply_op(node, [values[t] for t in node.inputs], shapes[out])
        if values[out].shape != shapes[out]:
            raise ShapeMismatch(f"{out!r}: got {values[out].shape}, expected {shapes[out]}", node=node.id)
    return values


# ---------------------------------------------------------------------------
# communication


def phase_keys(out: str, src: str, n_phases: int) -> list[str]:
    """Buffer names between the phases of a CommOp: input, intermediates, output."""
    return [src] + [f"{out}@{k}" for k in range(1, n_phases)] + [out]


def execute_step(
    step: CommStep,
    src: HetAnnotation,
    dst: HetAnnotation,
    shape: Sequence[int],
    in_key: str,
    out_key: str,
    states: Mapping[int, DeviceState],
    itemsize: int = 8,
) -> None:
    """Run one step: read ``in_key`` shards, deliver pieces of ``out_key``."""
    shape = tuple(shape)

    def need(m):
        return placement(dst, shape, m)

    def deliver(m, box, data):
        if m not in states:
            raise DeadlockDetected(f"device {m} is not running")
        states[m].receive(out_key, need(m), box, np.array(data, copy=True))

    def send(s, r, nbytes):
        if s != r and nbytes:
            states[s].sent[r] += nbytes

    if step.kind == IDENTITY:
        for g in step.groups:
            for m in g.members:
                box = SliceRegion(need(m).bounds)
                deliver(m, box, states[m].get(in_key).cut(box))
    elif step.kind == SEND_RECV:
        for s, r in step.pairs:
            shard = states[s].get(in_key)
            box = SliceRegion(shard.region.bounds)
            if box.bounds != need(r).bounds:
                raise ShapeMismatch(f"send-receive {s}->{r}: {box} vs {need(r)}")
            deliver(r, box, shard.data)
            send(s, r, box.size * itemsize)
    elif step.kind in COLLECTIVES:
        for g in step.groups:
            _run_group(step, g, in_key, states, need, deliver, send, itemsize)
    elif step.kind == BSR:
        if step.bsr is None:
            raise SimulationError("BSR step without a plan")
        for c in step.bsr.local_copies:
            deliver(c.device, c.region, states[c.device].get(in_key).cut(c.region))
        for t in step.bsr.transfers:
            deliver(t.receiver, t.region, states[t.sender].get(in_key).cut(t.region))
            send(t.sender, t.receiver, t.nbytes)
    else:
        raise UnsupportedOp(f"unknown step kind {step.kind}")


def _run_group(step, g, in_key, states, need, deliver, send, itemsize) -> None:
    members = sorted(g.members)
    boxes = {}
    for k in members:
        shard = states[k].get(in_key)
        box = SliceRegion(shard.region.bounds)
        if g.region is not None:
            box = box.intersect(g.region)
        boxes[k] = box
    if step.reducing:
        present = [k for k in members if boxes[k] is not None]
        target = g.region if g.region is not None else boxes[members[0]]
        if len(present) != len(members) or any(boxes[k].bounds != target.bounds for k in members):
            raise ShapeMismatch(f"{step.kind}: members {members} hold unequal pieces {boxes}")
        acc = None
        for k in members:
            piece = states[k].get(in_key).cut(target)
            acc = piece.copy() if acc is None else acc + piece
        result, covered = acc, None
    else:
        present = [b for b in boxes.values() if b is not None]
        if g.region is not None:
            target = g.region
        else:
            lo = [min(b.bounds[d][0] for b in present) for d in range(len(present[0].bounds))]
            hi = [max(b.bounds[d][1] for b in present) for d in range(len(present[0].bounds))]
            target = SliceRegion(tuple(zip(lo, hi)))
        dtype = states[members[0]].get(in_key).data.dtype
        result = np.zeros(target.shape, dtype=dtype)
        covered = np.zeros(target.shape, dtype=bool)
        for k in members:
            if boxes[k] is None:
                continue
            idx = boxes[k].slices(target)
            result[idx] = states[k].get(in_key).cut(boxes[k])
            covered[idx] = True
    for m in members:
        want = need(m).intersect(target)
        if want is None:
            continue
        idx = want.slices(target)
        if covered is not None and not covered[idx].all():
            raise MissingShard(f"{step.kind}: group {members} cannot supply {want} to device {m}")
        deliver(m, want, result[idx])
        for k in members:
            if k != m and boxes[k] is not None:
                piece = boxes[k].intersect(want)
                if piece is not None:
                    send(k, m, piece.size * itemsize)


def finalize_phase(dst: HetAnnotation, shape, out_key: str, states: Mapping[int, DeviceState], devices=None) -> None:
    for m in sorted(dst.devices if devices is None else devices):
        if m in states:
            states[m].finalize(out_key, placement(dst, shape, m))


def run_plan(
    plan: CommPlan, shards: Mapping[int, np.ndarray], states: dict[int, DeviceState] | None = None
) -> tuple[dict[int, np.ndarray], dict[tuple[int, int], int]]:
    """Execute a CommPlan on ``shards`` (laid out per ``plan.src``); returns dst shards and traffic."""
    devices = set(plan.src.devices) | set(plan.dst.devices)
    states = states if states is not None else {d: DeviceState(d) for d in sorted(devices)}
    for d, data in shards.items():
        states[d].store["x"] = Shard(placement(plan.src, plan.shape, d), np.asarray(data))
    keys = phase_keys("y", "x", len(plan.phases))
    for p, steps in enumerate(plan.phases):
        src, dst = plan.annotations[p], plan.annotations[p + 1]
        for step in steps:
            execute_step(step, src, dst, plan.shape, keys[p], keys[p + 1], states, plan.itemsize)
        finalize_phase(dst, plan.shape, keys[p + 1], states)
    out = {d: states[d].store["y"].data for d in plan.dst.devices}
    return out, traffic_log(states)


# ---------------------------------------------------------------------------
# rendezvous engine over per-device instruction lists


def execute(execs: Mapping[int, object], states: dict[int, DeviceState], runtime, max_rounds: int = 100000) -> None:
    """Drive every device's :class:`ExecGraph` to completion.

    ``runtime`` supplies ``local(device, item)`` for leaf/compute/finalize items
    and ``comm(item)`` for communication steps plus ``participants(item)``.
    """
    ptr = {d: 0 for d in execs}
    for _ in range(max_rounds):
        progress = False
        waiting: dict[tuple, set[int]] = defaultdict(set)
        for d in sorted(execs):
            items = execs[d].items
            while ptr[d] < len(items) and items[ptr[d]].kind != "comm":
                runtime.local(d, items[ptr[d]])
                ptr[d] += 1
                progress = True
            if ptr[d] < len(items):
                waiting[items[ptr[d]].key].add(d)
        if not waiting:
            return
        for key in sorted(waiting):
            d0 = min(waiting[key])
            item = execs[d0].items[ptr[d0]]
            parts = set(runtime.participants(item))
            if parts == waiting[key]:
                runtime.comm(item)
                for d in parts:
                    ptr[d] += 1
                progress = True
            elif not waiting[key] <= parts:
                raise DeadlockDetected(f"devices {sorted(waiting[key] - parts)} wait on a step they are not part of")
        if not progress:
            stuck = {str(k): sorted(v) for k, v in sorted(waiting.items())}
            raise DeadlockDetected(f"no step can fire; waiting: {json.dumps(stuck)}")
    raise DeadlockDetected("watchdog: round limit exceeded")


# ---------------------------------------------------------------------------
# whole-graph execution


class _Runtime:
    def __init__(self, graph: CompGraph, ctx, states, leaf_value, itemsize: int):
        self.graph, self.ctx, self.states = graph, ctx, states
        self.leaf_value, self.itemsize = leaf_value, itemsize
        self.keys = {
            nid: phase_keys(graph.nodes[nid].output, graph.nodes[nid].inputs[0], len(plan.phases))
            for nid, plan in ctx.plans.items()
        }

    def _region(self, tensor, device):
        return placement(self.ctx.annotations[tensor], self.ctx.shapes[tensor], device)

    def local(self, device: int, item) -> None:
        node = self.graph.nodes[item.node]
        st = self.states[device]
        if item.kind == "finalize":
            plan = self.ctx.plans[node.id]
            anno = plan.annotations[item.phase + 1]
            key = self.keys[node.id][item.phase + 1]
            st.finalize(key, placement(anno, plan.shape, device))
            return
        region = self._region(node.output, device)
        if item.kind == "leaf":
            value = np.asarray(self.leaf_value(node.output))
            if value.shape != self.ctx.shapes[node.output]:
                raise ShapeMismatch(
                    f"leaf {node.output!r}: value shape {value.shape} != {self.ctx.shapes[node.output]}",
                    tensor=node.output,
                )
            data = np.array(value[region.slices()], copy=True)
            if region.partial not in (None, 0):
                data = np.zeros_like(data)
        else:
            args = [st.get(t).data for t in node.inputs]
            data = apply_op(node, args, region.shape)
            if data.shape != region.shape:
                raise ShapeMismatch(
                    f"device {device}: {node.describe()} produced {data.shape}, expected {region.shape}",
                    node=node.id, tensor=node.output,
                )
        st.store[node.output] = Shard(region, data)

    def participants(self, item):
        return self.ctx.plans[item.node].phases[item.phase][item.step].devices

    def comm(self, item) -> None:
        plan = self.ctx.plans[item.node]
        keys = self.keys[item.node]
        step = plan.phases[item.phase][item.step]
        try:
            execute_step(step, plan.annotations[item.phase], plan.annotations[item.phase + 1], plan.shape,
                         keys[item.phase], keys[item.phase + 1], self.states, plan.itemsize)
        except SimulationError as e:
            e.node = e.node if e.node is not None else item.node
            raise


def run_context(graph: CompGraph, ctx, states: dict[int, DeviceState], leaf_value, itemsize: int = 8) -> None:
    """Instantiate every device for ``ctx`` and execute to completion."""
    from .specialize import instantiate_all

    execs = instantiate_all(graph, ctx)
    for d in execs:
        states.setdefault(d, DeviceState(d))
    execute(execs, states, _Runtime(graph, ctx, states, leaf_value, itemsize))


def gather(graph: CompGraph, ctx, states: Mapping[int, DeviceState], tensor: str) -> np.ndarray:
    anno = ctx.annotations[tensor]
    shards = {d: states[d].get(tensor).data for d in anno.devices if d in states}
    return reassemble(anno, shards, ctx.shapes[tensor])


@dataclass
class SimResult:
    outputs: dict[str, np.ndarray]
    traffic: dict[tuple[int, int], int]
    states: dict[int, DeviceState]
    schedule: object = None


def run(cluster: VirtualCluster | None, graph: CompGraph, strategy: int, schedule, inputs: Mapping[str, np.ndarray]) -> SimResult:
    """Execute a schedule; ``inputs`` holds full-batch values for every leaf.

    Returns the logical values of all graph sinks: micro-batch outputs are
    concatenated along the batch dimension (or summed when they have none),
    matching a single full-batch evaluation.
    """
    from .specialize import MB, POST, PRE, batch_dims, build_context, sections

    bw = None if cluster is None else cluster.bandwidth
    itemsize = 8 if cluster is None else cluster.itemsize
    sym = schedule.batch_symbol
    secs = sections(graph)
    sinks = graph.sinks()
    states: dict[int, DeviceState] = {}
    outputs: dict[str, np.ndarray] = {}

    def values(tensor):
        return np.asarray(inputs[tensor])

    pre = build_context(graph, strategy, schedule.bindings, section=PRE, bandwidth=bw, itemsize=itemsize)
    run_context(graph, pre, states, values, itemsize)
    for t in sinks:
        if t in pre.annotations and secs[graph.tensors[t].producer] == PRE:
            outputs[t] = gather(graph, pre, states, t)

    post_nodes = [n for n in graph.topo_order() if secs[n.id] == POST]
    carried = sorted({t for n in post_nodes for t in n.inputs if secs[graph.tensors[t].producer] == MB})
    acc: dict[tuple[int, str], np.ndarray] = {}
    per_run: dict[str, list[tuple[int, np.ndarray]]] = {}
    mb_sinks = [t for t in sinks if secs[graph.tensors[t].producer] == MB]

    for r in schedule.runs:
        pipe = schedule.pipelines[r.pipeline]
        ctx = build_context(graph, strategy, r.bindings, devices=pipe.devices, section=MB, bandwidth=bw,
                            itemsize=itemsize, batch_symbol=sym)

        def leaf_value(tensor, r=r):
            v = values(tensor)
            dims = batch_dims(graph, tensor, sym)
            if dims and secs[graph.tensors[tensor].producer] == MB:
                idx = [slice(None)] * v.ndim
                idx[dims[0]] = slice(r.offset, r.offset + r.size)
                v = v[tuple(idx)]
            return v

        run_context(graph, ctx, states, leaf_value, itemsize)
        for t in mb_sinks:
            if t in ctx.annotations:
                per_run.setdefault(t, []).append((r.offset, gather(graph, ctx, states, t)))
        for t in carried:
            if t not in ctx.annotations:
                continue
            if batch_dims(graph, t, sym):
                raise ShapeMismatch(f"{t!r} is accumulated across micro-batches but depends on {sym}", tensor=t)
            for d in ctx.annotations[t].devices:
                data = states[d].get(t).data
                acc[(d, t)] = data.copy() if (d, t) not in acc else acc[(d, t)] + data

    for t, parts in per_run.items():
        dims = batch_dims(graph, t, sym)
        parts = [p for _, p in sorted(parts, key=lambda x: x[0])] if dims else [p for _, p in parts]
        if dims:
            outputs[t] = np.concatenate(parts, axis=dims[0])
        else:
            total = parts[0]
            for p in parts[1:]:
                total = total + p
            outputs[t] = total

    if post_nodes:
        post = build_context(graph, strategy, schedule.bindings, section=POST, bandwidth=bw, itemsize=itemsize)
        for (d, t), data in acc.items():
            states[d].store[t] = Shard(placement(post.annotations[t], post.shapes[t], d), data)
        run_context(graph, post, states, values, itemsize)
        for t in sinks:
            if secs[graph.tensors[t].producer] == POST:
                outputs[t] = gather(graph, post, states, t)
    return SimResult(outputs, traffic_log(states), states, schedule)
