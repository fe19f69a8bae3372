"""Batched send-receive: slice tables, heuristic sender choice and fusion."""

from __future__ import annotations

import itertools
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .annotation import HetAnnotation, SliceRegion, placement
from .errors import NoOwner, PartialUnderBsr, UnknownDevice


def slice_grid(regions: Iterable[SliceRegion], shape: Sequence[int], skip_dims: Iterable[int] = ()) -> list[SliceRegion]:
    """Finest cells induced by superposing all region boundaries (row-major order).

    Dims in ``skip_dims`` are not cut: every cell spans them fully.
    """
    skip = set(skip_dims)
    cuts = [{0, int(n)} for n in shape]
    for r in regions:
        for d, (lo, hi) in enumerate(r.bounds):
            if d not in skip:
                cuts[d].update((lo, hi))
    axes = []
    for c in cuts:
        pts = sorted(c)
        axes.append(list(zip(pts[:-1], pts[1:])))
    return [SliceRegion(tuple(b)) for b in itertools.product(*axes)]


# ---------------------------------------------------------------------------
# table


@dataclass(frozen=True)
class BsrRow:
    tensor: str
    region: SliceRegion
    owners: tuple[int, ...]
    requesters: tuple[int, ...]
    nbytes: int


@dataclass
class BsrTable:
    rows: list[BsrRow]
    tensor: str = "t"
    itemsize: int = 8
    src_regions: dict[int, SliceRegion] = field(default_factory=dict)
    dst_regions: dict[int, SliceRegion] = field(default_factory=dict)

    @property
    def tensors(self) -> list[str]:
        return list(dict.fromkeys(r.tensor for r in self.rows)) or [self.tensor]

    def to_json(self) -> dict:
        return {
            "tensor": self.tensor,
            "itemsize": self.itemsize,
            "rows": [
                {"tensor": r.tensor, "region": r.region.to_json(), "owners": list(r.owners),
                 "requesters": list(r.requesters), "bytes": r.nbytes}
                for r in self.rows
            ],
        }


def _restricted_partial(anno: HetAnnotation, devices) -> bool:
    return any(
        spec.has_partial for group, spec in zip(anno.dg_union, anno.ds_union) if any(d in devices for d in group)
    )


def build_table(
    src: HetAnnotation,
    dst: HetAnnotation,
    shape: Sequence[int],
    tensor: str = "t",
    *,
    itemsize: int = 8,
    src_devices: Iterable[int] | None = None,
    dst_devices: Iterable[int] | None = None,
) -> BsrTable:
    """Ownership/demand table over the finest slices of ``shape``.

    With ``src_devices``/``dst_devices`` the table is restricted to those
    devices (used for per-subgroup transfers); only their bottom tier may then
    hold Partial values, since a shared top-tier partial ordinal is just copied.
    """
    shape = tuple(int(n) for n in shape)
    if src_devices is None and dst_devices is None:
        if src.has_partial or dst.has_partial:
            raise PartialUnderBsr(f"BSR cannot move Partial values ({tensor})", tensor=tensor)
        s_dev, d_dev = src.devices, dst.devices
    else:
        s_dev = list(src.devices if src_devices is None else src_devices)
        d_dev = list(dst.devices if dst_devices is None else dst_devices)
        if _restricted_partial(src, set(s_dev)) or _restricted_partial(dst, set(d_dev)):
            raise PartialUnderBsr(f"BSR cannot move Partial values ({tensor})", tensor=tensor)
    src_regions = {d: SliceRegion(placement(src, shape, d).bounds) for d in s_dev}
    dst_regions = {d: SliceRegion(placement(dst, shape, d).bounds) for d in d_dev}
    rows = []
    for cell in slice_grid(list(src_regions.values()) + list(dst_regions.values()), shape):
        requesters = tuple(sorted(d for d, r in dst_regions.items() if r.contains(cell)))
        if not requesters:
            continue
        owners = tuple(sorted(d for d, r in src_regions.items() if r.contains(cell)))
        rows.append(BsrRow(tensor, cell, owners, requesters, cell.size * itemsize))
    return BsrTable(rows, tensor, itemsize, src_regions, dst_regions)


# ---------------------------------------------------------------------------
# plan


@dataclass(frozen=True)
class Transfer:
    tensor: str
    region: SliceRegion
    sender: int
    receiver: int
    nbytes: int

    def to_json(self) -> dict:
        return {"tensor": self.tensor, "region": self.region.to_json(), "sender": self.sender,
                "receiver": self.receiver, "bytes": self.nbytes}


@dataclass(frozen=True)
class LocalCopy:
    device: int
    tensor: str
    region: SliceRegion

    def to_json(self) -> dict:
        return {"device": self.device, "tensor": self.tensor, "region": self.region.to_json()}


@dataclass
class BsrPlan:
    local_copies: list[LocalCopy] = field(default_factory=list)
    transfers: list[Transfer] = field(default_factory=list)
    tables: list[BsrTable] = field(default_factory=list)

    @property
    def fusion_groups(self) -> dict[tuple[int, int], list[Transfer]]:
        """Transfers per (sender, receiver) pair, payloads in canonical order."""
        groups: dict[tuple[int, int], list[Transfer]] = defaultdict(list)
        for t in self.transfers:
            groups[(t.sender, t.receiver)].append(t)
        return {k: sorted(v, key=lambda t: (t.tensor, t.region)) for k, v in sorted(groups.items())}

    @property
    def total_bytes(self) -> int:
        return sum(t.nbytes for t in self.transfers)

    def send_load(self) -> dict[int, int]:
        load: dict[int, int] = defaultdict(int)
        for t in self.transfers:
            load[t.sender] += t.nbytes
        return dict(load)

    @property
    def max_send(self) -> int:
        return max(self.send_load().values(), default=0)

    def traffic(self) -> dict[tuple[int, int], int]:
        out: dict[tuple[int, int], int] = defaultdict(int)
        for t in self.transfers:
            out[(t.sender, t.receiver)] += t.nbytes
        return dict(out)

    def to_json(self) -> dict:
        return {
            "local_copies": [c.to_json() for c in self.local_copies],
            "transfers": [t.to_json() for t in self.transfers],
            "fusion_groups": [
                {"sender": s, "receiver": r, "payloads": [t.to_json() for t in ts],
                 "bytes": sum(t.nbytes for t in ts)}
                for (s, r), ts in self.fusion_groups.items()
            ],
            "total_bytes": self.total_bytes,
        }


Bandwidth = Callable[[int, int], float]


def as_bandwidth(bandwidth) -> Bandwidth:
    """Normalise None / matrix / mapping / callable into ``f(sender, receiver)``."""
    if bandwidth is None:
        return lambda a, b: 1.0
    if callable(bandwidth):
        return bandwidth
    if isinstance(bandwidth, Mapping):
        def lookup(a, b):
            try:
                return bandwidth[(a, b)]
            except KeyError:
                raise UnknownDevice(f"no bandwidth entry for ({a}, {b})") from None
        return lookup
    matrix = np.asarray(bandwidth, dtype=float)

    def from_matrix(a, b):
        if not (0 <= a < matrix.shape[0] and 0 <= b < matrix.shape[1]):
            raise UnknownDevice(f"device pair ({a}, {b}) outside bandwidth matrix")
        return float(matrix[a, b])
    return from_matrix


def _plan_rows(rows: Iterable[BsrRow], bandwidth, heuristics: bool) -> BsrPlan:
    bw = as_bandwidth(bandwidth)
    plan = BsrPlan()
    load: dict[int, int] = defaultdict(int)
    for row in rows:
        for r in sorted(row.requesters):
            if r in row.owners:
                # heuristic I: the receiver already holds the slice
                plan.local_copies.append(LocalCopy(r, row.tensor, row.region))
                continue
            if not row.owners:
                raise NoOwner(f"slice {row.region} of {row.tensor} has no owner", tensor=row.tensor)
            if heuristics:
                # II: highest bandwidth, III: lowest cumulative send load, then lowest id
                sender = min(row.owners, key=lambda o: (-bw(o, r), load[o], o))
            else:
                sender = min(row.owners)
            load[sender] += row.nbytes
            plan.transfers.append(Transfer(row.tensor, row.region, sender, r, row.nbytes))
    return plan


def make_plan(table: BsrTable, bandwidth=None, *, heuristics: bool = True) -> BsrPlan:
    """Choose a sender for every (requester, slice); rows scanned in table order."""
    plan = _plan_rows(table.rows, bandwidth, heuristics)
    plan.tables = [table]
    return plan


def fuse(tables: Sequence[BsrTable], bandwidth=None, *, heuristics: bool = True) -> BsrPlan:
    """One globally planned BSR over several tensors (load tracked across all of them)."""
    ordered = sorted(tables, key=lambda t: t.tensor)
    seen = set()
    for t in ordered:
        if t.tensor in seen:
            raise ValueError(f"tensor {t.tensor!r} appears in more than one table")
        seen.add(t.tensor)
    rows = [r for t in ordered for r in sorted(t.rows, key=lambda r: r.region)]
    plan = _plan_rows(rows, bandwidth, heuristics)
    plan.tables = list(ordered)
    return plan


# ---------------------------------------------------------------------------
# reporting


def volume_report(plan: BsrPlan, cluster) -> dict[int, tuple[int, int]]:
    """Per sender: (intra-node bytes, inter-node bytes).  ``cluster`` needs ``node_of``."""
    node_of = cluster.node_of if hasattr(cluster, "node_of") else cluster
    report = {d: [0, 0] for d in sorted(node_of)}
    for t in plan.transfers:
        for d in (t.sender, t.receiver):
            if d not in node_of:
                raise UnknownDevice(f"device {d} is not part of the cluster")
        slot = 0 if node_of[t.sender] == node_of[t.receiver] else 1
        report[t.sender][slot] += t.nbytes
    return {d: (v[0], v[1]) for d, v in report.items()}


def render_volume_table(report: Mapping[int, tuple[int, int]]) -> str:
    header = ("device", "intra-node bytes", "inter-node bytes")
    body = [(str(d), str(a), str(b)) for d, (a, b) in sorted(report.items())]
    total = ("total", str(sum(a for a, _ in report.values())), str(sum(b for _, b in report.values())))
    rows = [header, *body, total]
    widths = [max(len(r[i]) for r in rows) for i in range(3)]
    lines = ["  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)
