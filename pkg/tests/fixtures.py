"""Graph fixtures and random generators shared by the test modules."""

from __future__ import annotations

import itertools
import math

import numpy as np

from hetshard.annotation import DUPLICATE, PARTIAL, HetAnnotation, ShardSpec
from hetshard.graph import CompGraph

RATIOS = ["1/2", "1/4", "1/4"]


def dp_tp_graph(partial_out: bool = False) -> CompGraph:
    """Two-way DP x two-way TP matmul on four devices.

    X [B, K] rows split over {0,1} x {2,3}; W column split inside each pair.
    With ``partial_out`` W is row split instead and Y comes out Partial,
    followed by a CommOp that all-reduces it.
    """
    g = CompGraph()
    dev = [0, 1, 2, 3]
    x = g.placeholder("X", ["B", 4], HetAnnotation.spmd(dev, {0: 2, -1: 2}) if not partial_out
                      else HetAnnotation.spmd(dev, {0: 2, 1: 2}))
    w = g.parameter("W", [4, 6], HetAnnotation.spmd(dev, {-1: 2, 1: 2}) if not partial_out
                    else HetAnnotation.spmd(dev, {-1: 2, 0: 2}))
    y = g.dot(x, w, name="Y")
    if partial_out:
        g.comm(y, HetAnnotation.spmd(dev, {0: 2, -1: 2}), name="Yr")
    return g


def hetero_graph(full: bool = True) -> CompGraph:
    """Seven-device heterogeneous strategy.

    Subgroup A = {0,3} runs TP2, B = {1} runs unsharded and hands over to
    {5,6} (pipeline), C = {2,4} runs CP2 (sequence split).  The batch is split
    unevenly across the three subgroups.  W1 is stored row-sharded across
    subgroups and gathered once per step.  With ``full=False`` the graph ends
    right after the cross-subgroup CommOp.
    """
    g = CompGraph()
    dg1 = [[0, 3], [1], [2, 4]]
    dg2 = [[0, 3], [5, 6], [2, 4]]
    x = g.placeholder("X", ["B", 4, 4], HetAnnotation.make(dg1, [{-1: 2}, {-1: 1}, {1: 2}], 0, RATIOS))
    w1 = g.parameter("W1", [4, 4], HetAnnotation.make(dg1, [{1: 2}, {-1: 1}, {-1: 2}], 0, RATIOS))
    w1g = g.comm(w1, HetAnnotation.make(dg1, [{1: 2}, {-1: 1}, {-1: 2}], DUPLICATE), name="W1g", once=True)
    w2 = g.parameter("W2", [4, 4], HetAnnotation.make(dg1, [{0: 2}, {-1: 1}, {-1: 2}], DUPLICATE))
    h = g.gelu(x, name="Xa")
    h = g.dot(h, w1g, name="H1")
    h = g.gelu(h, name="H2")
    y = g.dot(h, w2, name="Y")
    y2 = g.comm(y, HetAnnotation.make(dg2, [{1: 2}, {1: 2}, {1: 2}], 0, RATIOS), name="Yp")
    if full:
        w3 = g.parameter("W3", [4, 4], HetAnnotation.make(dg2, [{-1: 2}] * 3, DUPLICATE))
        z = g.dot(y2, w3, name="Z")
        g.comm(z, HetAnnotation.make(dg2, [{-1: 2}] * 3, 0, RATIOS), name="Zg")
    return g


def leaf_values(graph: CompGraph, bindings, seed: int = 0, integer: bool = False) -> dict:
    rng = np.random.default_rng(seed)
    shapes = graph.bind_symbols(bindings)
    out = {}
    for n in graph.topo_order():
        if n.is_leaf:
            shape = shapes[n.output]
            out[n.output] = rng.integers(-4, 5, size=shape) if integer else rng.standard_normal(shape)
    return out


# ---------------------------------------------------------------------------
# random annotations


def factorizations(n: int, max_parts: int = 3):
    """Ordered factorizations of n into factors > 1."""
    if n == 1:
        yield ()
        return
    if max_parts == 0:
        return
    for f in range(2, n + 1):
        if n % f == 0:
            for rest in factorizations(n // f, max_parts - 1):
                yield (f,) + rest


def random_spec(rng, n: int, rank: int, shape, allow_partial=True, extent=None) -> ShardSpec:
    """Random valid DS for a group of n devices (splits divide their extents)."""
    extent = list(shape) if extent is None else extent
    for _ in range(50):
        facs = list(factorizations(n))
        parts = facs[rng.integers(len(facs))]
        keys = list(range(rank)) + [DUPLICATE] + ([PARTIAL] if allow_partial else [])
        chosen = rng.choice(len(keys), size=len(parts), replace=False) if len(parts) <= len(keys) else None
        if chosen is None:
            continue
        entries = [(keys[k], c) for k, c in zip(chosen, parts)]
        if all(k < 0 or extent[k] % c == 0 for k, c in entries):
            return ShardSpec(entries) if entries else ShardSpec({DUPLICATE: 1})
    return ShardSpec({DUPLICATE: n})


def random_annotation(rng, devices, shape, allow_partial=True, max_hsize=3) -> HetAnnotation:
    """Random valid two-tier annotation over ``devices`` for a concrete ``shape``."""
    from fractions import Fraction

    from hetshard.annotation import top_bounds, validate

    devices = list(devices)
    rank = len(shape)
    for _ in range(100):
        perm = [int(d) for d in rng.permutation(devices)]
        h = int(rng.integers(1, min(max_hsize, len(perm)) + 1))
        cuts = sorted(rng.choice(range(1, len(perm)), size=h - 1, replace=False)) if h > 1 else []
        groups = [perm[a:b] for a, b in zip([0, *cuts], [*cuts, len(perm)])]
        hdims = [DUPLICATE] + list(range(rank)) + ([PARTIAL] if allow_partial else [])
        hdim = hdims[rng.integers(len(hdims))] if h > 1 else DUPLICATE
        ratios = None
        if hdim >= 0 and rng.random() < 0.5:
            w = rng.integers(1, 4, size=h)
            ratios = tuple(Fraction(int(x), int(w.sum())) for x in w)
        probe = HetAnnotation.make(groups, [ShardSpec({DUPLICATE: len(gr)}) for gr in groups], hdim, ratios)
        if hdim >= 0:
            bounds = top_bounds(probe, shape[hdim])
            if any(hi <= lo for lo, hi in bounds):
                continue
        specs = []
        for gi, gr in enumerate(groups):
            ext = list(shape)
            if hdim >= 0:
                lo, hi = top_bounds(probe, shape[hdim])[gi]
                ext[hdim] = hi - lo
            specs.append(random_spec(rng, len(gr), rank, shape, allow_partial, ext))
        anno = HetAnnotation.make(groups, specs, hdim, ratios)
        if not validate(anno, shape):
            return anno
    return HetAnnotation.spmd(devices, {DUPLICATE: len(devices)})


def cells(shape):
    return itertools.product(*[range(n) for n in shape])


def coverage(anno, shape):
    """cell -> sorted list of (partial ordinal, device) holding it (brute force)."""
    from hetshard.annotation import placement

    out = {c: [] for c in cells(shape)}
    for d in anno.devices:
        r = placement(anno, shape, d)
        for c in itertools.product(*[range(lo, hi) for lo, hi in r.bounds]):
            out[c].append((r.partial, d))
    return {c: sorted(v, key=lambda x: (-1 if x[0] is None else x[0], x[1])) for c, v in out.items()}


def size(shape):
    return math.prod(shape)


SHAPE_EXTENTS = (2, 4, 6, 8, 12, 16)


def random_shape(rng, max_rank=2):
    rank = int(rng.integers(1, max_rank + 1))
    return tuple(int(rng.choice(SHAPE_EXTENTS)) for _ in range(rank))


def _single_change(rng, spec: ShardSpec, rank, extent):
    """One entry of ``spec`` rekeyed (P->D, P->S, S->D), or None."""
    entries = list(spec.entries)
    used = {k for k, _ in entries}
    options = []
    for i, (k, c) in enumerate(entries):
        targets = []
        if k == PARTIAL:
            targets = [DUPLICATE] + [d for d in range(rank) if extent[d] % c == 0]
        elif k >= 0:
            targets = [DUPLICATE]
        for t in targets:
            if t not in used:
                options.append((i, t))
    if not options:
        return None
    i, t = options[rng.integers(len(options))]
    entries[i] = (t, entries[i][1])
    return ShardSpec(entries)


def random_pair(rng, max_devices=8, allow_partial=True):
    """(src, dst, shape) drawn from a mix of same-group and unrelated layouts."""
    from hetshard.annotation import top_bounds, validate

    shape = random_shape(rng)
    n = int(rng.integers(1, max_devices + 1))
    devices = sorted(int(d) for d in rng.choice(max_devices, size=n, replace=False))
    src = random_annotation(rng, devices, shape, allow_partial)
    mode = rng.random()
    if mode < 0.35:
        # bottom-tier transitions with the top tier kept
        specs = []
        for g, spec in enumerate(src.ds_union):
            ext = list(shape)
            if src.hsize > 1 and src.hdim >= 0:
                lo, hi = top_bounds(src, shape[src.hdim])[g]
                ext[src.hdim] = hi - lo
            if rng.random() < 0.6:
                specs.append(_single_change(rng, spec, len(shape), ext) or spec)
            else:
                specs.append(random_spec(rng, spec.size, len(shape), shape, allow_partial, ext))
        dst = src.replace(ds_union=tuple(specs))
    elif mode < 0.6 and src.hsize > 1:
        # top-tier transitions with the bottom tier kept
        hdims = [DUPLICATE] + list(range(len(shape))) + ([PARTIAL] if allow_partial else [])
        dst = src.replace(hdim=hdims[rng.integers(len(hdims))], hsplit_ratios=None)
    else:
        others = sorted(int(d) for d in rng.choice(max_devices, size=int(rng.integers(1, max_devices + 1)), replace=False))
        dst = random_annotation(rng, devices if rng.random() < 0.5 else others, shape, allow_partial)
    if validate(dst, shape):
        dst = random_annotation(rng, devices, shape, allow_partial)
    return src, dst, shape


def run_full(graph: CompGraph, strategy: int, bindings, inputs) -> dict:
    """Simulate every node of ``strategy`` on its own devices; logical value per tensor."""
    from hetshard.sim import gather, run_context
    from hetshard.specialize import build_context

    ctx = build_context(graph, strategy, bindings)
    states: dict = {}
    run_context(graph, ctx, states, lambda t: np.asarray(inputs[t]))
    return {t: gather(graph, ctx, states, t) for t in ctx.annotations}


def random_layout(rng, devices, shape, like=None, allow_partial=True):
    """Random annotation; with ``like`` it reuses that annotation's subgroups."""
    from hetshard.annotation import top_bounds, validate

    if like is None:
        return random_annotation(rng, devices, shape, allow_partial)
    rank = len(shape)
    for _ in range(50):
        hdims = [DUPLICATE] + list(range(rank)) + ([PARTIAL] if allow_partial else [])
        hdim = hdims[rng.integers(len(hdims))] if like.hsize > 1 else DUPLICATE
        ratios = like.hsplit_ratios if hdim >= 0 and like.hdim >= 0 else None
        probe = HetAnnotation.make(like.dg_union, like.ds_union, hdim, ratios)
        specs = []
        for g, grp in enumerate(like.dg_union):
            ext = list(shape)
            if hdim >= 0:
                lo, hi = top_bounds(probe, shape[hdim])[g]
                ext[hdim] = hi - lo
            specs.append(random_spec(rng, len(grp), rank, shape, allow_partial, ext))
        anno = HetAnnotation.make(like.dg_union, specs, hdim, ratios)
        if not validate(anno, shape):
            return anno
    return random_annotation(rng, devices, shape, allow_partial)


def random_mlp(rng, n_devices=4, partial=False):
    """Small graph exercising every compute op under a random strategy.

    Returns (graph, bindings); deduction of the strategy may legitimately fail.
    """
    devices = list(range(n_devices))
    b = int(rng.choice([4, 8]))
    g = CompGraph()
    x_anno = random_layout(rng, devices, (b, 4, 4), allow_partial=partial)
    like = x_anno if rng.random() < 0.8 else None
    w_anno = random_layout(rng, devices, (4, 8), like=like, allow_partial=False)
    v_anno = random_layout(rng, devices, (8, 4), like=like if rng.random() < 0.8 else None, allow_partial=False)
    x = g.placeholder("X", ["B", 4, 4], x_anno)
    w = g.parameter("W", [4, 8], w_anno)
    v = g.parameter("V", [8, 4], v_anno)
    h = g.dot(x, w, name="H")
    kind = rng.integers(3)
    if kind == 0:
        h = g.elementwise("scale", h, name="Hs", factor=2)
    elif kind == 1:
        h = g.add(h, h, name="Hs")
    else:
        h = g.elementwise("neg", h, name="Hs")
    y = g.dot(h, v, name="Y")
    r = g.reshape(y, ["B", 16], name="R")
    g.sum(r, 1, name="S")
    return g, {"B": b}


def bsr_three_case():
    """Table exercising local copy, bandwidth preference and load balancing.

    Devices 0-3 share one node, 8 and 9 another.  Slice 1 is already on its
    requester 1; slice 2 is owned by 1 and 9 and wanted by 8; slices 3 and 4
    are owned by 1 and 2 and wanted by 0 and 3.
    """
    from hetshard.annotation import SliceRegion
    from hetshard.bsr import BsrRow, BsrTable
    from hetshard.sim import default_bandwidth

    def box(i):
        return SliceRegion(((2 * i, 2 * i + 2),))

    rows = [
        BsrRow("t", box(0), (1,), (1,), 16),
        BsrRow("t", box(1), (1, 9), (8,), 16),
        BsrRow("t", box(2), (1, 2), (0,), 16),
        BsrRow("t", box(3), (1, 2), (3,), 16),
    ]
    node_of = {0: 0, 1: 0, 2: 0, 3: 0, 8: 1, 9: 1}
    return BsrTable(rows, "t", 8), default_bandwidth(node_of), node_of


def two_pipeline_graph() -> CompGraph:
    """Two TP2 replicas on {0,1} and {2,3}, then a once-per-step batch reduction.

    G sums Y over the batch; each replica holds a partial G, and the flagged
    CommOp all-reduces it across replicas (a gradient-sync stand-in).
    """
    g = CompGraph()
    dg = [[0, 1], [2, 3]]
    x = g.placeholder("X", ["B", 4], HetAnnotation.make(dg, [{-1: 2}] * 2, 0))
    w = g.parameter("W", [4, 6], HetAnnotation.make(dg, [{1: 2}] * 2, DUPLICATE))
    y = g.dot(x, w, name="Y")
    yg = g.comm(y, HetAnnotation.make(dg, [{-1: 2}] * 2, 0), name="Yg")
    s = g.sum(yg, 0, name="G")
    g.comm(s, HetAnnotation.make(dg, [{-1: 2}] * 2, DUPLICATE), name="Gs", once=True)
    return g


TOY_SHAPES = {"W1": (8, 8), "W2": (8, 4), "W3": (16,)}


def toy_model(rng, n_strategies=2, devices=range(8)) -> CompGraph:
    """Three parameters, each followed by a gelu, under random Partial-free strategies."""
    g = CompGraph(n_strategies)
    for name, shape in TOY_SHAPES.items():
        devices = list(devices)
        annos = []
        for _ in range(n_strategies):
            devs = sorted(int(d) for d in rng.choice(devices, size=int(rng.integers(1, len(devices) + 1)), replace=False))
            annos.append(random_annotation(rng, devs, shape, allow_partial=False))
        g.gelu(g.parameter(name, list(shape), annos), name=name + "a")
    return g
