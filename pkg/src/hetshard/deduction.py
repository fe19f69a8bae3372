"""Annotation deduction through the graph.

Rules are evaluated on *descriptors*: for one device (bottom tier) or one
subgroup (top tier), a map ``key -> (digit, count, tag)`` telling which piece
of each split dimension it holds and which partial contribution it carries.
Each operator maps input descriptors to an output descriptor; an ordered
shard spec reproducing the output descriptors on every device is then fitted.
Sharding that no spec can reproduce is rejected, so everything deduced here is
locally computable without communication.
"""

from __future__ import annotations

from itertools import permutations
from typing import Sequence

from .annotation import DUPLICATE, PARTIAL, HetAnnotation, ShardSpec, convert_hsize, validate_structure
from .errors import (
    DeductionError,
    DgUnionMismatch,
    MissingAnnotation,
    NotRefinable,
    ShardingError,
    UnderivableSharding,
)
from .graph import ELEMENTWISE, CompGraph, OpNode
from .symbolic import reshape_groups

Piece = tuple  # (digit, count, tag)
Descriptor = dict  # key -> Piece


# ---------------------------------------------------------------------------
# descriptors


def bottom_descriptors(spec: ShardSpec) -> list[Descriptor]:
    out = []
    for i in range(spec.size):
        digits = spec.digits(i)
        out.append({k: (digits[k], c, None) for k, c in spec.entries if k != DUPLICATE and c > 1})
    return out


def _ratio_tag(anno: HetAnnotation):
    r = anno.hsplit_ratios
    if r is None or all(x == r[0] for x in r):
        return None
    return r


def top_descriptors(anno: HetAnnotation) -> list[Descriptor]:
    h = anno.hsize
    if h == 1 or anno.hdim == DUPLICATE:
        return [{} for _ in range(h)]
    tag = _ratio_tag(anno) if anno.hdim >= 0 else None
    return [{anno.hdim: (g, h, tag)} for g in range(h)]


def _combine(partial: Piece | None, extra: Piece) -> Piece:
    if partial is None:
        return (extra[0], extra[1], None)
    return (partial[0] * extra[1] + extra[0], partial[1] * extra[1], None)


# ---------------------------------------------------------------------------
# per-operator rules


def _rule_elementwise(node: OpNode, descs, ranks, graph, top) -> Descriptor:
    fn = node.attrs["fn"]
    _, linear = ELEMENTWISE[fn]
    first = descs[0]
    for d in descs[1:]:
        if d != first:
            raise UnderivableSharding(f"{fn}: operands are sharded differently")
    if PARTIAL in first and not linear:
        raise UnderivableSharding(f"{fn} is not linear; a partial input needs a CommOp first")
    return dict(first)


def _rule_dot(node: OpNode, descs, ranks, graph, top) -> Descriptor:
    x, w = descs
    r = ranks[0]
    xc, wc = x.get(r - 1), w.get(0)
    if xc != wc:
        raise UnderivableSharding(f"dot: contraction dim sharded inconsistently ({xc} vs {wc})")
    if PARTIAL in x and PARTIAL in w:
        raise UnderivableSharding("dot: both operands are partial")
    out = {k: v for k, v in x.items() if 0 <= k < r - 1}
    if 1 in w:
        out[r - 1] = w[1]
    partial = x.get(PARTIAL) or w.get(PARTIAL)
    if xc is not None:
        partial = _combine(partial, xc)
    if partial is not None:
        out[PARTIAL] = partial
    return out


def _rule_sum(node: OpNode, descs, ranks, graph, top) -> Descriptor:
    (x,) = descs
    axis = node.attrs["axis"]
    out: Descriptor = {}
    partial = x.get(PARTIAL)
    for k, v in x.items():
        if k == PARTIAL:
            continue
        if k == axis:
            partial = _combine(partial, v)
        else:
            out[k - 1 if k > axis else k] = v
    if partial is not None:
        out[PARTIAL] = partial
    return out


def _rule_reshape(node: OpNode, descs, ranks, graph, top) -> Descriptor:
    (x,) = descs
    src = graph.tensors[node.inputs[0]].shape
    dst = graph.tensors[node.output].shape
    groups = reshape_groups(src, dst)
    out: Descriptor = {}
    for k, v in x.items():
        if k == PARTIAL:
            out[k] = v
            continue
        ins, outs = next((i, o) for i, o in groups if k in i)
        major = next((i for i in ins if not (src[i].is_literal and src[i].coeff == 1)), ins[0])
        if k != major or not outs:
            raise UnderivableSharding(f"reshape: split on dim {k} does not survive as a major factor")
        if top and (len(ins) != 1 or len(outs) != 1 or src[k] != dst[outs[0]]):
            raise UnderivableSharding("reshape: top-tier split must be on a preserved dimension")
        out[outs[0]] = v
    return out


RULES = {
    "elementwise": _rule_elementwise,
    "dot": _rule_dot,
    "sum": _rule_sum,
    "reshape": _rule_reshape,
}


def _key_map(node: OpNode, input_index: int, key: int, ranks, graph) -> int | None:
    """Where an input sharding key lands in the output (used only to order fitted specs)."""
    if key == DUPLICATE:
        return DUPLICATE
    if key == PARTIAL:
        return PARTIAL
    if node.kind == "dot":
        r = ranks[0]
        if input_index == 0:
            return PARTIAL if key == r - 1 else key
        return PARTIAL if key == 0 else r - 1
    if node.kind == "sum":
        axis = node.attrs["axis"]
        return PARTIAL if key == axis else (key - 1 if key > axis else key)
    if node.kind == "reshape":
        src = graph.tensors[node.inputs[0]].shape
        dst = graph.tensors[node.output].shape
        for ins, outs in reshape_groups(src, dst):
            if key in ins and outs:
                return outs[0]
        return None
    return key


# ---------------------------------------------------------------------------
# fitting


def _matches(spec: ShardSpec, descs: Sequence[Descriptor]) -> bool:
    labels: dict = {}
    used: dict = {}
    for i, desc in enumerate(descs):
        digits = spec.digits(i)
        for k, v in desc.items():
            if k == PARTIAL:
                # partial ordinals are labels: any consistent bijection is valid
                if labels.setdefault(v[0], digits[PARTIAL]) != digits[PARTIAL]:
                    return False
                if used.setdefault(digits[PARTIAL], v[0]) != v[0]:
                    return False
            elif digits[k] != v[0]:
                return False
    return True


def fit_spec(descs: Sequence[Descriptor], preferred: Sequence[int] = ()) -> ShardSpec:
    """Smallest ordered spec whose row-major device decomposition yields ``descs``."""
    n = len(descs)
    counts: dict[int, int] = {}
    for desc in descs:
        if set(desc) != set(descs[0]):
            raise UnderivableSharding("devices disagree on which dimensions are sharded")
        for k, v in desc.items():
            if counts.setdefault(k, v[1]) != v[1]:
                raise UnderivableSharding(f"inconsistent shard counts for key {k}")
    prod = 1
    for c in counts.values():
        prod *= c
    if n % prod:
        raise UnderivableSharding(f"shard product {prod} does not divide subgroup size {n}")
    entries = [(k, c) for k, c in counts.items()]
    if n // prod > 1:
        entries.append((DUPLICATE, n // prod))
    if not entries:
        return ShardSpec({DUPLICATE: 1})
    rank = {k: i for i, k in enumerate(dict.fromkeys(preferred))}
    entries.sort(key=lambda e: (rank.get(e[0], len(rank)), -e[0]))
    for perm in permutations(entries):
        spec = ShardSpec(perm)
        if _matches(spec, descs):
            return spec
    raise UnderivableSharding(f"no shard spec reproduces per-device layout {descs}")


def fit_top(descs: Sequence[Descriptor]) -> tuple[int, tuple | None]:
    """(hdim, ratios) reproducing the per-subgroup top-tier descriptors."""
    h = len(descs)
    keys = {k for d in descs for k in d}
    if not keys:
        return DUPLICATE, None
    if len(keys) != 1 or any(not d for d in descs):
        raise UnderivableSharding(f"top tier cannot express {descs}")
    (key,) = keys
    pieces = [d[key] for d in descs]
    if key == PARTIAL:
        if len({p[0] for p in pieces}) != h:
            raise UnderivableSharding("top-tier partial contributions collide")
        return PARTIAL, None
    if [p[0] for p in pieces] != list(range(h)):
        raise UnderivableSharding("top-tier split is not in subgroup order")
    return key, pieces[0][2]


# ---------------------------------------------------------------------------
# public operations


def unify_inputs(annos: Sequence[HetAnnotation]) -> list[HetAnnotation]:
    """Bring every input to the largest hsize and check the DG Unions agree."""
    if not annos:
        raise DeductionError("no input annotations")
    target = max(a.hsize for a in annos)
    ref = next(a for a in annos if a.hsize == target)
    out = []
    for a in annos:
        if a.hsize == target:
            conv = a
        elif a.hsize == 1:
            conv = None
            candidates = dict.fromkeys([a.hdim, DUPLICATE, PARTIAL, *a.ds_union[0].keys()])
            for key in candidates:
                try:
                    c = convert_hsize(a, target, hdim=key)
                except NotRefinable:
                    continue
                if c.dg_union == ref.dg_union:
                    conv = c
                    break
            if conv is None:
                raise DgUnionMismatch(f"{a} cannot be refined to match {ref}; insert a CommOp")
        else:
            try:
                conv = convert_hsize(a, target)
            except NotRefinable as e:
                raise DgUnionMismatch(f"{a} cannot be refined to hsize {target}: {e}") from e
        if conv.dg_union != ref.dg_union:
            raise DgUnionMismatch(f"DG Unions differ: {conv.dg_union} vs {ref.dg_union}; insert a CommOp")
        out.append(conv)
    return out


def deduce_op(node: OpNode, in_annos: Sequence[HetAnnotation], graph: CompGraph) -> HetAnnotation:
    if node.kind not in RULES:
        raise DeductionError(f"no deduction rule for {node.kind}", node=node.id)
    rule = RULES[node.kind]
    annos = unify_inputs(in_annos)
    ranks = [graph.tensors[t].rank for t in node.inputs]
    tops = [top_descriptors(a) for a in annos]
    h = annos[0].hsize
    out_top = [rule(node, [t[g] for t in tops], ranks, graph, True) for g in range(h)]
    hdim, ratios = fit_top(out_top)
    if h == 1:
        hdim, ratios = DUPLICATE, None
    preferred = [
        _key_map(node, i, k, ranks, graph) for i, a in enumerate(annos) for s in a.ds_union for k in s.keys()
    ]
    specs = []
    for g in range(h):
        per_input = [bottom_descriptors(a.ds_union[g]) for a in annos]
        n = len(annos[0].dg_union[g])
        for i, p in enumerate(per_input):
            if len(p) != n:
                raise DeductionError(f"input {i} subgroup {g} has {len(p)} shards for {n} devices")
        descs = [rule(node, [p[i] for p in per_input], ranks, graph, False) for i in range(n)]
        specs.append(fit_spec(descs, [k for k in preferred if k is not None]))
    return HetAnnotation(annos[0].dg_union, tuple(specs), hdim, None, ratios)


def deduce_graph(graph: CompGraph, strategy: int) -> dict[str, HetAnnotation]:
    """Fill every tensor's slot for ``strategy``; returns tensor id -> annotation."""
    if not 0 <= strategy < graph.strategy_count:
        raise DeductionError(f"strategy {strategy} out of range")
    result: dict[str, HetAnnotation] = {}
    for node in graph.topo_order():
        try:
            if node.carries_annotations:
                anno = node.annotations[strategy]
                if anno is None:
                    raise MissingAnnotation(f"{node.kind} node {node.id} has no annotation for strategy {strategy}")
                validate_structure(anno, graph.tensors[node.output].rank)
                if node.is_comm and node.inputs[0] not in result:
                    raise MissingAnnotation(f"CommOp {node.id} input was not deduced")
            else:
                anno = deduce_op(node, [result[t] for t in node.inputs], graph)
        except ShardingError as e:
            if e.node is None:
                e.node = node.id
            e.op = e.op or "deduce_graph"
            raise
        result[node.output] = anno
    for tid, anno in result.items():
        graph.tensors[tid].annotations[strategy] = anno
    graph.deduced.add(strategy)
    return result
