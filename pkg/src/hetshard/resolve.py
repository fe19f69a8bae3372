"""Lowering a (source, destination) annotation pair into communication steps.

Decision tree:

* same hsize/hdim/ratios: each subgroup resolves its bottom tier on its own
  (Identity, SendRecv, AllReduce, ReduceScatter, AllGather, or a local BSR);
* same hsize and DG Union but a different hdim: optionally align every
  subgroup to the destination DS, then one top-tier Split-collective;
* anything else: a single BSR step, which cannot carry Partial values.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Sequence

from .annotation import (
    DUPLICATE,
    PARTIAL,
    DeviceGroup,
    HetAnnotation,
    ShardSpec,
    SliceRegion,
    canonical,
    placement,
    validate,
)
from .bsr import BsrPlan, build_table, fuse, make_plan, slice_grid
from .errors import PartialUnderBsr, UnsupportedHdimTransition

IDENTITY = "Identity"
SEND_RECV = "SendRecv"
ALL_REDUCE = "AllReduce"
REDUCE_SCATTER = "ReduceScatter"
ALL_GATHER = "AllGather"
SPLIT_ALL_REDUCE = "SplitAllReduce"
SPLIT_REDUCE_SCATTER = "SplitReduceScatter"
SPLIT_ALL_GATHER = "SplitAllGather"
BSR = "Bsr"

COLLECTIVES = (ALL_REDUCE, REDUCE_SCATTER, ALL_GATHER, SPLIT_ALL_REDUCE, SPLIT_REDUCE_SCATTER, SPLIT_ALL_GATHER)
REDUCING = (ALL_REDUCE, REDUCE_SCATTER, SPLIT_ALL_REDUCE, SPLIT_REDUCE_SCATTER)
TOP_TIER = (SPLIT_ALL_REDUCE, SPLIT_REDUCE_SCATTER, SPLIT_ALL_GATHER)


@dataclass(frozen=True)
class CommGroup:
    members: tuple[int, ...]
    region: SliceRegion | None = None  # None: the members' whole shards

    def to_json(self) -> dict:
        return {"members": list(self.members), "region": None if self.region is None else self.region.to_json()}


@dataclass
class CommStep:
    kind: str
    groups: list[CommGroup] = field(default_factory=list)
    pairs: list[tuple[int, int]] = field(default_factory=list)
    bsr: BsrPlan | None = None
    phase: int = 0
    subgroup: int | None = None

    @property
    def devices(self) -> list[int]:
        """Every device taking part in the step."""
        out: set[int] = set()
        for g in self.groups:
            out.update(g.members)
        for s, r in self.pairs:
            out.update((s, r))
        if self.bsr is not None:
            for t in self.bsr.transfers:
                out.update((t.sender, t.receiver))
            out.update(c.device for c in self.bsr.local_copies)
        return sorted(out)

    @property
    def reducing(self) -> bool:
        return self.kind in REDUCING

    def to_json(self) -> dict:
        out = {"kind": self.kind, "phase": self.phase, "subgroup": self.subgroup, "devices": self.devices}
        if self.groups:
            out["groups"] = [g.to_json() for g in self.groups]
        if self.pairs:
            out["pairs"] = [list(p) for p in self.pairs]
        if self.bsr is not None:
            out["bsr"] = self.bsr.to_json()
        return out


@dataclass
class CommPlan:
    src: HetAnnotation
    dst: HetAnnotation
    shape: tuple[int, ...]
    annotations: list[HetAnnotation]  # one more than phases: src, [mid], dst
    phases: list[list[CommStep]]
    itemsize: int = 8

    @property
    def steps(self) -> list[CommStep]:
        return [s for p in self.phases for s in p]

    def kinds(self) -> list[str]:
        return [s.kind for s in self.steps]

    def predicted_traffic(self) -> dict[tuple[int, int], int]:
        """Bytes per (sender, receiver) under the direct-exchange model."""
        out: dict[tuple[int, int], int] = defaultdict(int)
        for p, steps in enumerate(self.phases):
            src, dst = self.annotations[p], self.annotations[p + 1]
            for step in steps:
                for (s, r), n in step_traffic(step, src, dst, self.shape, self.itemsize).items():
                    out[(s, r)] += n
        return dict(out)

    def to_json(self) -> dict:
        return {
            "version": "v1",
            "kind": "comm_plan",
            "shape": list(self.shape),
            "src": self.src.to_json(),
            "dst": self.dst.to_json(),
            "annotations": [a.to_json() for a in self.annotations],
            "phases": [[s.to_json() for s in p] for p in self.phases],
        }


def step_traffic(step: CommStep, src: HetAnnotation, dst: HetAnnotation, shape, itemsize: int = 8):
    """Bytes each member sends: its source piece intersected with each receiver's need."""
    out: dict[tuple[int, int], int] = defaultdict(int)
    if step.kind in COLLECTIVES:
        for g in step.groups:
            for k in g.members:
                have = placement(src, shape, k)
                if g.region is not None:
                    have = have.intersect(g.region)
                    if have is None:
                        continue
                for m in g.members:
                    if m == k:
                        continue
                    piece = have.intersect(placement(dst, shape, m))
                    if piece is not None:
                        out[(k, m)] += piece.size * itemsize
    elif step.kind == SEND_RECV:
        for s, r in step.pairs:
            if s != r:
                out[(s, r)] += placement(src, shape, s).size * itemsize
    elif step.kind == BSR and step.bsr is not None:
        for t in step.bsr.transfers:
            out[(t.sender, t.receiver)] += t.nbytes
    return dict(out)


# ---------------------------------------------------------------------------
# bottom tier


def _eff_hdim(anno: HetAnnotation) -> int:
    return DUPLICATE if anno.hsize == 1 else anno.hdim


def _collective_groups(spec: ShardSpec, position: int, group: DeviceGroup) -> list[CommGroup]:
    """Devices that differ only in the digit at ``position`` of ``spec``."""
    buckets: dict[tuple, list[int]] = defaultdict(list)
    counts = [c for _, c in spec.entries]
    for i, d in enumerate(group):
        digits, rest = [], i
        for c in reversed(counts):
            digits.append(rest % c)
            rest //= c
        digits.reverse()
        key = tuple(x for j, x in enumerate(digits) if j != position)
        buckets[key].append(d)
    return [CommGroup(tuple(m)) for _, m in sorted(buckets.items())]


def bottom_resolve(
    src_ds: ShardSpec,
    dst_ds: ShardSpec,
    src_dg: DeviceGroup,
    dst_dg: DeviceGroup,
    *,
    context: tuple | None = None,
    bandwidth=None,
    itemsize: int = 8,
) -> CommStep:
    """Resolve one subgroup.  ``context`` = (src anno, dst anno, shape, subgroup) enables BSR planning."""
    a, b = src_ds.normalized(), dst_ds.normalized()
    if a.entries == b.entries and len(src_dg) == len(dst_dg):
        if src_dg.devices == dst_dg.devices:
            return CommStep(IDENTITY, [CommGroup(src_dg.devices)])
        return CommStep(SEND_RECV, pairs=list(zip(src_dg.devices, dst_dg.devices)))
    if src_dg.devices == dst_dg.devices and len(a.entries) == len(b.entries):
        diffs = [j for j, (x, y) in enumerate(zip(a.entries, b.entries)) if x != y]
        if len(diffs) == 1:
            j = diffs[0]
            (ks, cs), (kd, cd) = a.entries[j], b.entries[j]
            kind = None
            if cs == cd and ks == PARTIAL and kd == DUPLICATE:
                kind = ALL_REDUCE
            elif cs == cd and ks == PARTIAL and kd >= 0:
                kind = REDUCE_SCATTER
            elif cs == cd and ks >= 0 and kd == DUPLICATE:
                kind = ALL_GATHER
            if kind is not None:
                return CommStep(kind, _collective_groups(a, j, src_dg))
    if a.has_partial or b.has_partial:
        raise PartialUnderBsr(f"{a} -> {b} needs BSR, which cannot move Partial values")
    step = CommStep(BSR)
    if context is not None:
        src, dst, shape, g = context
        table = build_table(src, dst, shape, itemsize=itemsize, src_devices=src_dg.devices, dst_devices=dst_dg.devices)
        step.bsr = make_plan(table, bandwidth)
    return step


# ---------------------------------------------------------------------------
# top tier

_TOP_KINDS = {
    ("partial", "dup"): SPLIT_ALL_REDUCE,
    ("partial", "split"): SPLIT_REDUCE_SCATTER,
    ("split", "dup"): SPLIT_ALL_GATHER,
}


def _hdim_class(h: int) -> str:
    return "partial" if h == PARTIAL else "dup" if h == DUPLICATE else "split"


def top_resolve(src: HetAnnotation, dst: HetAnnotation, shape: Sequence[int]) -> CommStep:
    """One Split-collective across subgroups; bottom-tier sharding is left unchanged."""
    shape = tuple(int(n) for n in shape)
    kind = _TOP_KINDS.get((_hdim_class(_eff_hdim(src)), _hdim_class(_eff_hdim(dst))))
    if kind is None:
        raise UnsupportedHdimTransition(f"hdim {src.hdim} -> {dst.hdim} has no top-tier collective")
    if src.hsize != dst.hsize or src.dg_union != dst.dg_union:
        raise UnsupportedHdimTransition("top-tier collectives need identical DG Unions")
    if [s.normalized() for s in src.ds_union] != [s.normalized() for s in dst.ds_union]:
        raise UnsupportedHdimTransition("top-tier collectives need identical DS Unions")
    if any(s.has_partial for s in src.ds_union) or any(s.has_partial for s in dst.ds_union):
        raise UnsupportedHdimTransition("bottom-tier Partial is not handled by Split-collectives")
    src_regions = {d: placement(src, shape, d) for d in src.devices}
    dst_regions = {d: placement(dst, shape, d) for d in dst.devices}
    skip = (src.hdim,) if kind == SPLIT_ALL_GATHER else ()
    cells = slice_grid(list(src_regions.values()) + list(dst_regions.values()), shape, skip)
    by_members: dict[tuple, list[SliceRegion]] = defaultdict(list)
    for cell in cells:
        owners = []
        for group in src.dg_union:
            if kind == SPLIT_ALL_GATHER:
                own = [d for d in group if _covers_except(src_regions[d], cell, src.hdim)]
            else:
                own = [d for d in group if src_regions[d].contains(cell)]
            if not own:
                raise UnsupportedHdimTransition(f"no owner of {cell} in subgroup {list(group)}")
            owners.append(own)
        for k in range(max(len(o) for o in owners)):
            by_members[tuple(o[k % len(o)] for o in owners)].append(cell)
    groups = []
    for members, regions in by_members.items():
        for region in _merge_boxes(regions):
            groups.append(CommGroup(members, region))
    groups.sort(key=lambda g: (g.region, g.members))
    step = CommStep(kind, groups)
    if not covers(step, src, dst, shape):
        raise UnsupportedHdimTransition(f"{kind} groups cannot realise {src} -> {dst}")
    return step


def _covers_except(region: SliceRegion, cell: SliceRegion, dim: int) -> bool:
    return all(
        d == dim or (a <= c and e <= b) for d, ((a, b), (c, e)) in enumerate(zip(region.bounds, cell.bounds))
    )


def _merge_boxes(regions: list[SliceRegion]) -> list[SliceRegion]:
    if len(regions) == 1:
        return regions
    lo = tuple(min(r.bounds[d][0] for r in regions) for d in range(len(regions[0].bounds)))
    hi = tuple(max(r.bounds[d][1] for r in regions) for d in range(len(regions[0].bounds)))
    box = SliceRegion(tuple(zip(lo, hi)))
    if sum(r.size for r in regions) == box.size:
        return [box]
    return sorted(regions)


def covers(step: CommStep, src: HetAnnotation, dst: HetAnnotation, shape) -> bool:
    """Abstractly check that a collective step delivers every destination cell correctly."""
    src_regions = {d: placement(src, shape, d) for d in src.devices}
    dst_regions = {d: placement(dst, shape, d) for d in dst.devices}
    extra = [g.region for g in step.groups if g.region is not None]
    cells = slice_grid(list(src_regions.values()) + list(dst_regions.values()) + extra, shape)
    ordinals = {r.partial for r in src_regions.values()}
    for m, need in dst_regions.items():
        for cell in cells:
            if not need.contains(cell):
                continue
            ok = False
            for g in step.groups:
                if m not in g.members or (g.region is not None and not g.region.contains(cell)):
                    continue
                holders = [k for k in g.members if k in src_regions and src_regions[k].contains(cell)]
                if step.reducing:
                    got = sorted(src_regions[k].partial for k in holders)
                    ok = len(got) == len(ordinals) and set(got) == ordinals
                else:
                    ok = bool(holders) and all(src_regions[k].partial is None for k in holders)
                if ok:
                    break
            if not ok:
                return False
    return True


# ---------------------------------------------------------------------------
# classification


def _bsr_step(src, dst, shape, bandwidth, itemsize) -> CommStep:
    table = build_table(src, dst, shape, itemsize=itemsize)
    return CommStep(BSR, bsr=make_plan(table, bandwidth))


def _ratios_key(anno: HetAnnotation):
    return canonical(anno)[4]


def classify(
    src: HetAnnotation, dst: HetAnnotation, shape: Sequence[int], *, bandwidth=None, itemsize: int = 8
) -> CommPlan:
    shape = tuple(int(n) for n in shape)
    for anno in (src, dst):
        errs = validate(anno, shape)
        if errs:
            raise errs[0]

    def plan(annos, phases):
        for p, steps in enumerate(phases):
            for s in steps:
                s.phase = p
        return CommPlan(src, dst, shape, annos, phases, itemsize)

    same_top = (
        src.hsize == dst.hsize
        and _eff_hdim(src) == _eff_hdim(dst)
        and _ratios_key(src) == _ratios_key(dst)
    )
    if same_top:
        steps = []
        for g in range(src.hsize):
            step = bottom_resolve(
                src.ds_union[g], dst.ds_union[g], src.dg_union[g], dst.dg_union[g],
                context=(src, dst, shape, g), bandwidth=bandwidth, itemsize=itemsize,
            )
            step.subgroup = g
            steps.append(step)
        return plan([src, dst], [steps])

    if src.hsize == dst.hsize and src.dg_union == dst.dg_union:
        try:
            if [s.normalized() for s in src.ds_union] == [s.normalized() for s in dst.ds_union]:
                return plan([src, dst], [[top_resolve(src, dst, shape)]])
            mid = src.replace(ds_union=dst.ds_union)
            if not validate(mid, shape):
                top = top_resolve(mid, dst, shape)
                align = []
                for g in range(src.hsize):
                    step = bottom_resolve(
                        src.ds_union[g], mid.ds_union[g], src.dg_union[g], mid.dg_union[g],
                        context=(src, mid, shape, g), bandwidth=bandwidth, itemsize=itemsize,
                    )
                    step.subgroup = g
                    align.append(step)
                return plan([src, mid, dst], [align, [top]])
        except (UnsupportedHdimTransition, PartialUnderBsr):
            pass

    if src.has_partial or dst.has_partial:
        raise PartialUnderBsr(f"{src} -> {dst} needs BSR, which cannot move Partial values")
    return plan([src, dst], [[_bsr_step(src, dst, shape, bandwidth, itemsize)]])


def fused_bsr(pairs, bandwidth=None, itemsize: int = 8) -> BsrPlan:
    """Fused BSR over several (tensor, src, dst, shape) entries."""
    tables = [build_table(s, d, shape, t, itemsize=itemsize) for t, s, d, shape in pairs]
    return fuse(tables, bandwidth)

