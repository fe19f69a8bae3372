"""Migrating parameters between two annotated strategies with one fused BSR plan."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .annotation import HetAnnotation, SliceRegion, annotations_equal, placement
from .bsr import BsrPlan, build_table, fuse
from .errors import MissingShard, PartialUnderBsr, UndeducedStrategy
from .graph import CompGraph
from .sim import DeviceState, Shard


@dataclass(frozen=True)
class SwitchEntry:
    tensor: str
    src: HetAnnotation
    dst: HetAnnotation


def diff_strategies(graph: CompGraph, a: int, b: int) -> list[SwitchEntry]:
    """Parameters whose annotation differs between strategies ``a`` and ``b``."""
    for s in (a, b):
        if s not in graph.deduced:
            raise UndeducedStrategy(f"strategy {s} has not been deduced", op="diff_strategies")
    out = []
    for node in graph.nodes_of_kind("parameter"):
        t = graph.tensors[node.output]
        src, dst = t.annotations[a], t.annotations[b]
        if src is None or dst is None:
            raise UndeducedStrategy(f"parameter {t.id!r} lacks an annotation", tensor=t.id)
        if not annotations_equal(src, dst):
            out.append(SwitchEntry(t.id, src, dst))
    return out


def plan_switch(
    diff: Sequence[SwitchEntry], shapes: Mapping[str, Sequence[int]], bandwidth=None, *, itemsize: int = 8
) -> BsrPlan:
    """One globally balanced BSR plan covering every entry."""
    tables = []
    for e in diff:
        if e.src.has_partial or e.dst.has_partial:
            raise PartialUnderBsr(f"parameter {e.tensor!r} carries Partial values", tensor=e.tensor)
        tables.append(build_table(e.src, e.dst, shapes[e.tensor], e.tensor, itemsize=itemsize))
    return fuse(tables, bandwidth)


def load_state(
    annotations: Mapping[str, HetAnnotation], values: Mapping[str, np.ndarray]
) -> dict[int, DeviceState]:
    """Simulator state holding ``values`` laid out per ``annotations``."""
    states: dict[int, DeviceState] = {}
    for t, anno in annotations.items():
        v = np.asarray(values[t])
        for d in anno.devices:
            region = placement(anno, v.shape, d)
            data = np.array(v[region.slices()], copy=True)
            if region.partial not in (None, 0):
                data = np.zeros_like(data)
            states.setdefault(d, DeviceState(d)).store[t] = Shard(region, data)
    return states


def apply_switch(states: Mapping[int, DeviceState], plan: BsrPlan) -> dict[int, DeviceState]:
    """New state after executing ``plan``; the input state is left untouched."""
    new = {d: s.copy() for d, s in states.items()}
    for table in plan.tables:
        t = table.tensor
        for d, region in table.src_regions.items():
            shard = states.get(d).store.get(t) if d in states else None
            if shard is None or shard.region.bounds != region.bounds:
                raise MissingShard(f"device {d} does not hold the source shard {region} of {t!r}", tensor=t)
    pieces: dict[tuple[int, str], list[tuple[SliceRegion, np.ndarray]]] = {}
    for c in plan.local_copies:
        pieces.setdefault((c.device, c.tensor), []).append((c.region, states[c.device].store[c.tensor].cut(c.region)))
    for tr in plan.transfers:
        data = states[tr.sender].store[tr.tensor].cut(tr.region)
        pieces.setdefault((tr.receiver, tr.tensor), []).append((tr.region, data))
        new[tr.sender].sent[tr.receiver] += tr.nbytes
    for table in plan.tables:
        t = table.tensor
        for d in table.src_regions:
            new[d].store.pop(t, None)
        for d, region in table.dst_regions.items():
            st = new.setdefault(d, DeviceState(d))
            got = pieces.get((d, t), [])
            dtype = got[0][1].dtype if got else np.float64
            buf = np.zeros(region.shape, dtype=dtype)
            mask = np.zeros(region.shape, dtype=bool)
            for box, data in got:
                idx = box.slices(region)
                buf[idx] = data
                mask[idx] = True
            if not mask.all():
                raise MissingShard(f"device {d} cannot assemble {region} of {t!r}", tensor=t)
            st.store[t] = Shard(region, buf)
    return new
