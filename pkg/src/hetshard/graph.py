"""Single-device computation graph with CommOps and per-strategy annotation slots.

The graph is written from the viewpoint of one device.  Leaves (placeholders,
parameters) and CommOps carry explicit annotations, one per registered
strategy; everything else is filled in by deduction.

Supported kinds: ``placeholder``, ``parameter``, ``elementwise``, ``dot``,
``sum``, ``reshape`` and ``comm``.  New operators need a shape rule here, a
sharding rule in :mod:`hetshard.deduction` and a kernel in :mod:`hetshard.sim`.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence

from .annotation import HetAnnotation
from .errors import CycleDetected, GraphError, ShapeError, ShardingError
from .symbolic import SymDim, as_shape, bind_shape, reshape_groups, symbols_of

SCHEMA_VERSION = "v1"

LEAF_KINDS = ("placeholder", "parameter")

# name -> (arity, linear in every argument)
ELEMENTWISE = {
    "gelu": (1, False),
    "relu": (1, False),
    "neg": (1, True),
    "scale": (1, True),
    "add": (2, True),
    "mul": (2, False),
}


@dataclass
class TensorRef:
    id: str
    shape: tuple[SymDim, ...]
    dtype: str = "float64"
    annotations: list[HetAnnotation | None] = field(default_factory=list)
    producer: int | None = None

    @property
    def rank(self) -> int:
        return len(self.shape)


@dataclass
class OpNode:
    id: int
    kind: str
    inputs: list[str]
    outputs: list[str]
    attrs: dict[str, Any] = field(default_factory=dict)
    annotations: list[HetAnnotation | None] = field(default_factory=list)

    @property
    def is_leaf(self) -> bool:
        return self.kind in LEAF_KINDS

    @property
    def is_comm(self) -> bool:
        return self.kind == "comm"

    @property
    def carries_annotations(self) -> bool:
        return self.is_leaf or self.is_comm

    @property
    def output(self) -> str:
        return self.outputs[0]

    def describe(self) -> str:
        if self.kind == "elementwise":
            return self.attrs["fn"]
        return self.kind


class CompGraph:
    def __init__(self, strategy_count: int = 1):
        if strategy_count < 1:
            raise GraphError("strategy_count must be >= 1")
        self.strategy_count = strategy_count
        self.nodes: dict[int, OpNode] = {}
        self.tensors: dict[str, TensorRef] = {}
        self.deduced: set[int] = set()

    # construction -------------------------------------------------------
    def _slots(self, annotations) -> list[HetAnnotation | None]:
        if annotations is None:
            return [None] * self.strategy_count
        if isinstance(annotations, HetAnnotation):
            return [annotations] * self.strategy_count
        annotations = list(annotations)
        if len(annotations) != self.strategy_count:
            raise GraphError(f"expected {self.strategy_count} annotations, got {len(annotations)}")
        return annotations

    def _new_tensor(self, name: str | None, shape, dtype: str) -> TensorRef:
        tid = name or f"t{len(self.tensors)}"
        if tid in self.tensors:
            raise GraphError(f"tensor {tid!r} already exists")
        ref = TensorRef(tid, as_shape(shape), dtype, [None] * self.strategy_count)
        self.tensors[tid] = ref
        return ref

    def _add(self, kind, inputs, out_shape, *, name=None, dtype=None, attrs=None, annotations=None) -> str:
        for t in inputs:
            if t not in self.tensors:
                raise GraphError(f"unknown tensor {t!r}")
        if dtype is None:
            dtype = self.tensors[inputs[0]].dtype if inputs else "float64"
        out = self._new_tensor(name, out_shape, dtype)
        node = OpNode(len(self.nodes), kind, list(inputs), [out.id], dict(attrs or {}))
        if node.carries_annotations:
            node.annotations = self._slots(annotations)
            out.annotations = list(node.annotations)
        out.producer = node.id
        self.nodes[node.id] = node
        return out.id

    def placeholder(self, name, shape, annotations=None, dtype="float64") -> str:
        return self._add("placeholder", [], shape, name=name, dtype=dtype, annotations=annotations)

    def parameter(self, name, shape, annotations=None, dtype="float64") -> str:
        return self._add("parameter", [], shape, name=name, dtype=dtype, annotations=annotations)

    def elementwise(self, fn: str, *inputs: str, name=None, **attrs) -> str:
        if fn not in ELEMENTWISE:
            raise GraphError(f"unknown elementwise function {fn!r}")
        arity, _ = ELEMENTWISE[fn]
        if len(inputs) != arity:
            raise GraphError(f"{fn} takes {arity} inputs")
        shape = self.tensors[inputs[0]].shape
        for t in inputs[1:]:
            if self.tensors[t].shape != shape:
                raise ShapeError(f"{fn}: shape mismatch between {inputs[0]!r} and {t!r}")
        return self._add("elementwise", inputs, shape, name=name, attrs={"fn": fn, **attrs})

    def gelu(self, x, name=None):
        return self.elementwise("gelu", x, name=name)

    def relu(self, x, name=None):
        return self.elementwise("relu", x, name=name)

    def add(self, a, b, name=None):
        return self.elementwise("add", a, b, name=name)

    def dot(self, x: str, w: str, name=None) -> str:
        xs, ws = self.tensors[x].shape, self.tensors[w].shape
        if len(ws) != 2 or len(xs) < 1:
            raise ShapeError(f"dot expects [..., k] x [k, n], got {len(xs)}D x {len(ws)}D")
        if xs[-1] != ws[0]:
            raise ShapeError(f"dot contraction mismatch: {xs[-1]} vs {ws[0]}")
        return self._add("dot", [x, w], xs[:-1] + (ws[1],), name=name)

    def sum(self, x: str, axis: int, name=None) -> str:
        shape = self.tensors[x].shape
        if not 0 <= axis < len(shape):
            raise ShapeError(f"sum axis {axis} out of range")
        return self._add("sum", [x], shape[:axis] + shape[axis + 1:], name=name, attrs={"axis": axis})

    def reshape(self, x: str, shape: Sequence, name=None) -> str:
        target = as_shape(shape)
        reshape_groups(self.tensors[x].shape, target)
        return self._add("reshape", [x], target, name=name, attrs={"shape": [d.to_json() for d in target]})

    def comm(self, x: str, annotations, name=None, once: bool | None = None) -> str:
        attrs = {} if once is None else {"once": bool(once)}
        return self._add("comm", [x], self.tensors[x].shape, name=name, attrs=attrs, annotations=annotations)

    # strategies ---------------------------------------------------------
    def add_strategy(self) -> int:
        """Append an empty annotation slot everywhere; returns the new index."""
        self.strategy_count += 1
        for node in self.nodes.values():
            if node.carries_annotations:
                node.annotations.append(None)
        for t in self.tensors.values():
            t.annotations.append(None)
        return self.strategy_count - 1

    def set_annotation(self, target: str | int, strategy: int, anno: HetAnnotation) -> None:
        """Fill a leaf/CommOp slot, addressed by node id or output tensor id."""
        node = self.nodes[target] if isinstance(target, int) else self.producer(target)
        if not node.carries_annotations:
            raise GraphError(f"node {node.id} ({node.kind}) does not carry annotations")
        node.annotations[strategy] = anno
        self.tensors[node.output].annotations[strategy] = anno
        self.deduced.discard(strategy)

    def annotation(self, tensor: str, strategy: int) -> HetAnnotation | None:
        return self.tensors[tensor].annotations[strategy]

    # queries ------------------------------------------------------------
    def producer(self, tensor: str) -> OpNode:
        return self.nodes[self.tensors[tensor].producer]

    def consumers(self, tensor: str) -> list[OpNode]:
        return [n for n in self.topo_order() if tensor in n.inputs]

    def sinks(self) -> list[str]:
        used = {t for n in self.nodes.values() for t in n.inputs}
        return [t for t in self.tensors if t not in used]

    def nodes_of_kind(self, *kinds: str) -> list[OpNode]:
        return [n for n in self.topo_order() if n.kind in kinds]

    @property
    def symbols(self) -> set[str]:
        out: set[str] = set()
        for t in self.tensors.values():
            out |= symbols_of(t.shape)
        return out

    def ancestors(self, node_id: int) -> set[int]:
        seen: set[int] = set()
        stack = [node_id]
        while stack:
            n = self.nodes[stack.pop()]
            for t in n.inputs:
                p = self.tensors[t].producer
                if p not in seen:
                    seen.add(p)
                    stack.append(p)
        return seen

    def topo_order(self) -> list[OpNode]:
        """Producers first; ties broken by node id."""
        indeg = {}
        users: dict[int, list[int]] = {i: [] for i in self.nodes}
        for node in self.nodes.values():
            deps = set()
            for t in node.inputs:
                if t not in self.tensors:
                    raise GraphError(f"node {node.id} reads unknown tensor {t!r}")
                deps.add(self.tensors[t].producer)
            indeg[node.id] = len(deps)
            for d in deps:
                if d in users:
                    users[d].append(node.id)
        ready = [i for i, k in indeg.items() if k == 0]
        heapq.heapify(ready)
        order = []
        while ready:
            i = heapq.heappop(ready)
            order.append(self.nodes[i])
            for u in users[i]:
                indeg[u] -= 1
                if indeg[u] == 0:
                    heapq.heappush(ready, u)
        if len(order) != len(self.nodes):
            stuck = sorted(i for i, k in indeg.items() if k > 0)
            raise CycleDetected(f"cycle through nodes {stuck}", node=stuck[0])
        return order

    def validate(self) -> None:
        """Structural checks; idempotent and side-effect free."""
        produced: dict[str, int] = {}
        for node in self.nodes.values():
            for t in node.outputs:
                if t in produced:
                    raise GraphError(f"tensor {t!r} produced by nodes {produced[t]} and {node.id}", tensor=t)
                produced[t] = node.id
            if node.carries_annotations and len(node.annotations) != self.strategy_count:
                raise GraphError(f"node {node.id} has {len(node.annotations)} slots", node=node.id)
        for tid, t in self.tensors.items():
            if produced.get(tid) != t.producer:
                raise GraphError(f"tensor {tid!r} has no consistent producer", tensor=tid)
            if len(t.annotations) != self.strategy_count:
                raise GraphError(f"tensor {tid!r} has {len(t.annotations)} slots", tensor=tid)
        self.topo_order()

    # symbols ------------------------------------------------------------
    def bind_symbols(self, bindings: Mapping[str, int]) -> dict[str, tuple[int, ...]]:
        """Concrete shapes of every tensor; the graph itself stays symbolic."""
        out = {}
        for tid, t in self.tensors.items():
            try:
                out[tid] = bind_shape(t.shape, bindings)
            except ShardingError as e:
                e.tensor = tid
                raise
        return out

    # serialization ------------------------------------------------------
    def to_json(self, annotated: bool = False) -> dict:
        def anno(a):
            return None if a is None else a.to_json()

        tensors = []
        for t in self.tensors.values():
            entry = {"id": t.id, "shape": [d.to_json() for d in t.shape], "dtype": t.dtype}
            if annotated:
                entry["annotations"] = [anno(a) for a in t.annotations]
            tensors.append(entry)
        nodes = []
        for n in self.topo_order():
            entry = {"id": n.id, "kind": n.kind, "inputs": n.inputs, "outputs": n.outputs, "attrs": n.attrs}
            if n.carries_annotations:
                entry["annotations"] = [anno(a) for a in n.annotations]
            nodes.append(entry)
        return {
            "version": SCHEMA_VERSION,
            "kind": "annotated_graph" if annotated else "graph",
            "strategy_count": self.strategy_count,
            "deduced": sorted(self.deduced) if annotated else [],
            "tensors": tensors,
            "nodes": nodes,
        }

    @classmethod
    def from_json(cls, data: Mapping) -> CompGraph:
        if data.get("version") != SCHEMA_VERSION:
            raise GraphError(f"unsupported graph schema version {data.get('version')!r}")
        g = cls(int(data["strategy_count"]))

        def anno(a):
            return None if a is None else HetAnnotation.from_json(a)

        for t in data["tensors"]:
            ref = TensorRef(t["id"], as_shape(t["shape"]), t.get("dtype", "float64"), [None] * g.strategy_count)
            if "annotations" in t:
                ref.annotations = [anno(a) for a in t["annotations"]]
            g.tensors[ref.id] = ref
        for n in data["nodes"]:
            node = OpNode(int(n["id"]), n["kind"], list(n["inputs"]), list(n["outputs"]), dict(n.get("attrs", {})))
            if node.carries_annotations:
                node.annotations = [anno(a) for a in n.get("annotations", [None] * g.strategy_count)]
                for s, a in enumerate(node.annotations):
                    g.tensors[node.output].annotations[s] = a
            for t in node.outputs:
                if t not in g.tensors:
                    raise GraphError(f"node {node.id} outputs unknown tensor {t!r}", node=node.id)
                g.tensors[t].producer = node.id
            g.nodes[node.id] = node
        g.deduced = set(data.get("deduced", []))
        g.validate()
        return g


def iter_annotated(graph: CompGraph, strategy: int) -> Iterable[tuple[str, HetAnnotation]]:
    for tid, t in graph.tensors.items():
        a = t.annotations[strategy]
        if a is not None:
            yield tid, a
