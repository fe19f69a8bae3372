"""Two-tier sharding annotations and the device -> slice placement map.

A tensor's placement is described by a *top tier* (how the tensor is cut
across sharding subgroups, along ``hdim``) and a *bottom tier* (a plain SPMD
shard spec inside each subgroup).  Sharding keys follow the usual convention:
``d >= 0`` splits physical dimension ``d``, ``-1`` duplicates and ``-2``
stores partial (additive) values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Iterator, Mapping, Sequence

from .errors import (
    AnnotationError,
    BadSplitDim,
    CardinalityMismatch,
    DeviceNotInAnnotation,
    IndivisibleSplit,
    NotRefinable,
    OverlappingSubgroups,
)

DUPLICATE = -1
PARTIAL = -2


class InvalidRatios(AnnotationError):
    pass


@dataclass(frozen=True)
class DeviceGroup:
    devices: tuple[int, ...]

    def __post_init__(self):
        devices = tuple(int(d) for d in self.devices)
        if not devices:
            raise CardinalityMismatch("device group must not be empty")
        if any(d < 0 for d in devices):
            raise AnnotationError(f"negative device id in {devices}")
        if len(set(devices)) != len(devices):
            raise OverlappingSubgroups(f"duplicate device id in group {devices}")
        object.__setattr__(self, "devices", devices)

    def __len__(self) -> int:
        return len(self.devices)

    def __iter__(self) -> Iterator[int]:
        return iter(self.devices)

    def __contains__(self, device) -> bool:
        return device in self.devices

    def index(self, device: int) -> int:
        return self.devices.index(device)

    def __repr__(self) -> str:
        return f"DG{list(self.devices)}"


@dataclass(frozen=True)
class ShardSpec:
    """Ordered map ``key -> count``; devices enumerate the entries row-major."""

    entries: tuple[tuple[int, int], ...]

    def __init__(self, entries: Mapping[int, int] | Iterable[tuple[int, int]] = ()):
        if isinstance(entries, Mapping):
            entries = entries.items()
        pairs = tuple((int(k), int(c)) for k, c in entries)
        keys = [k for k, _ in pairs]
        if len(set(keys)) != len(keys):
            raise AnnotationError(f"repeated sharding key in {pairs}")
        for k, c in pairs:
            if k < PARTIAL:
                raise BadSplitDim(f"invalid sharding key {k}")
            if c < 1:
                raise CardinalityMismatch(f"shard count must be positive, got {k}:{c}")
        object.__setattr__(self, "entries", pairs)

    @property
    def size(self) -> int:
        return math.prod(c for _, c in self.entries)

    def count(self, key: int) -> int:
        for k, c in self.entries:
            if k == key:
                return c
        return 1

    def keys(self) -> list[int]:
        return [k for k, _ in self.entries]

    @property
    def split_dims(self) -> list[int]:
        return [k for k, c in self.entries if k >= 0 and c > 1]

    @property
    def has_partial(self) -> bool:
        return self.count(PARTIAL) > 1

    def normalized(self) -> ShardSpec:
        return ShardSpec((k, c) for k, c in self.entries if c > 1)

    def digits(self, index: int) -> dict[int, int]:
        """Row-major decomposition of a device's position into per-key digits."""
        out = {}
        for k, c in reversed(self.entries):
            out[k] = index % c
            index //= c
        return out

    def with_count(self, key: int, count: int) -> ShardSpec:
        return ShardSpec((k, count if k == key else c) for k, c in self.entries)

    def as_dict(self) -> dict[int, int]:
        return dict(self.entries)

    def __repr__(self) -> str:
        return "{" + ", ".join(f"{k}:{c}" for k, c in self.entries) + "}"


@dataclass(frozen=True, order=True)
class SliceRegion:
    """Half-open box over the logical tensor, plus the partial ordinal it holds."""

    bounds: tuple[tuple[int, int], ...]
    partial: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(hi - lo for lo, hi in self.bounds)

    @property
    def size(self) -> int:
        return math.prod(self.shape)

    @property
    def is_empty(self) -> bool:
        return any(hi <= lo for lo, hi in self.bounds)

    def slices(self, origin: SliceRegion | None = None) -> tuple[slice, ...]:
        """Index expression selecting this box, optionally relative to ``origin``."""
        if origin is None:
            return tuple(slice(lo, hi) for lo, hi in self.bounds)
        return tuple(
            slice(lo - olo, hi - olo) for (lo, hi), (olo, _) in zip(self.bounds, origin.bounds)
        )

    def intersect(self, other: SliceRegion) -> SliceRegion | None:
        bounds = tuple(
            (max(a, c), min(b, d)) for (a, b), (c, d) in zip(self.bounds, other.bounds)
        )
        if any(hi <= lo for lo, hi in bounds):
            return None
        return SliceRegion(bounds)

    def contains(self, other: SliceRegion) -> bool:
        return all(a <= c and d <= b for (a, b), (c, d) in zip(self.bounds, other.bounds))

    def same_box(self, other: SliceRegion) -> bool:
        return self.bounds == other.bounds

    def to_json(self) -> dict:
        return {"bounds": [list(b) for b in self.bounds], "partial": self.partial}

    @classmethod
    def from_json(cls, data) -> SliceRegion:
        return cls(tuple(tuple(b) for b in data["bounds"]), data.get("partial"))

    def __repr__(self) -> str:
        box = "x".join(f"[{lo},{hi})" for lo, hi in self.bounds)
        return box if self.partial is None else f"{box}#p{self.partial}"


def _as_fraction(value) -> Fraction:
    if isinstance(value, str):
        return Fraction(value.strip())
    return Fraction(value)


@dataclass(frozen=True)
class HetAnnotation:
    dg_union: tuple[DeviceGroup, ...]
    ds_union: tuple[ShardSpec, ...]
    hdim: int = DUPLICATE
    hsize: int | None = None
    hsplit_ratios: tuple[Fraction, ...] | None = field(default=None)

    def __post_init__(self):
        dgs = tuple(g if isinstance(g, DeviceGroup) else DeviceGroup(tuple(g)) for g in self.dg_union)
        dss = tuple(s if isinstance(s, ShardSpec) else ShardSpec(s) for s in self.ds_union)
        object.__setattr__(self, "dg_union", dgs)
        object.__setattr__(self, "ds_union", dss)
        object.__setattr__(self, "hdim", int(self.hdim))
        if self.hsize is None:
            object.__setattr__(self, "hsize", len(dgs))
        if self.hsplit_ratios is not None:
            object.__setattr__(
                self, "hsplit_ratios", tuple(_as_fraction(r) for r in self.hsplit_ratios)
            )

    @classmethod
    def spmd(cls, devices: Sequence[int], ds: Mapping[int, int] | ShardSpec) -> HetAnnotation:
        """Plain single-subgroup annotation."""
        return cls((DeviceGroup(tuple(devices)),), (ShardSpec(ds) if not isinstance(ds, ShardSpec) else ds,))

    @classmethod
    def make(cls, dg_union, ds_union, hdim: int = DUPLICATE, ratios=None) -> HetAnnotation:
        return cls(tuple(dg_union), tuple(ds_union), hdim, None, ratios)

    @property
    def devices(self) -> list[int]:
        return [d for g in self.dg_union for d in g]

    @property
    def top_vacuous(self) -> bool:
        return self.hsize == 1

    @property
    def has_partial(self) -> bool:
        return (self.hdim == PARTIAL and self.hsize > 1) or any(s.has_partial for s in self.ds_union)

    def locate(self, device: int) -> tuple[int, int]:
        """(subgroup index, position inside the subgroup) of ``device``."""
        for g, group in enumerate(self.dg_union):
            if device in group:
                return g, group.index(device)
        raise DeviceNotInAnnotation(f"device {device} not in {self}")

    def ratios(self) -> tuple[Fraction, ...]:
        if self.hsplit_ratios is not None:
            return self.hsplit_ratios
        return tuple(Fraction(1, self.hsize) for _ in range(self.hsize))

    def partial_counts(self) -> list[int]:
        return [s.count(PARTIAL) for s in self.ds_union]

    def replace(self, **changes) -> HetAnnotation:
        values = dict(
            dg_union=self.dg_union,
            ds_union=self.ds_union,
            hdim=self.hdim,
            hsize=None,
            hsplit_ratios=self.hsplit_ratios,
        )
        values.update(changes)
        return HetAnnotation(**values)

    def __repr__(self) -> str:
        parts = [f"dg={[list(g) for g in self.dg_union]}", f"ds={list(self.ds_union)}"]
        if self.hsize > 1:
            parts.append(f"hdim={self.hdim}")
        if self.hsplit_ratios is not None:
            parts.append("ratios=[" + ",".join(str(r) for r in self.hsplit_ratios) + "]")
        return "Het(" + ", ".join(parts) + ")"

    # JSON -----------------------------------------------------------------
    def to_json(self) -> dict:
        return {
            "dg_union": [list(g) for g in self.dg_union],
            "ds_union": [{str(k): c for k, c in s.entries} for s in self.ds_union],
            "hdim": self.hdim,
            "hsize": self.hsize,
            "hsplit_ratios": None
            if self.hsplit_ratios is None
            else [f"{r.numerator}/{r.denominator}" for r in self.hsplit_ratios],
        }

    @classmethod
    def from_json(cls, data: Mapping) -> HetAnnotation:
        ds_union = [ShardSpec((int(k), int(c)) for k, c in s.items()) for s in data["ds_union"]]
        return cls(
            tuple(DeviceGroup(tuple(g)) for g in data["dg_union"]),
            tuple(ds_union),
            int(data.get("hdim", DUPLICATE)),
            data.get("hsize"),
            data.get("hsplit_ratios"),
        )


# ---------------------------------------------------------------------------
# validation


def structural_errors(anno: HetAnnotation, rank: int) -> list[AnnotationError]:
    """Violations that do not depend on concrete extents."""
    errors: list[AnnotationError] = []
    if not (anno.hsize == len(anno.dg_union) == len(anno.ds_union)):
        errors.append(
            CardinalityMismatch(
                f"hsize={anno.hsize}, |dg_union|={len(anno.dg_union)}, |ds_union|={len(anno.ds_union)}"
            )
        )
        return errors
    seen: dict[int, int] = {}
    for g, group in enumerate(anno.dg_union):
        for d in group:
            if d in seen:
                errors.append(OverlappingSubgroups(f"device {d} in subgroups {seen[d]} and {g}"))
            seen[d] = g
    for g, (group, spec) in enumerate(zip(anno.dg_union, anno.ds_union)):
        if spec.size != len(group):
            errors.append(
                CardinalityMismatch(f"subgroup {g}: shard product {spec.size} != group size {len(group)}")
            )
        for k in spec.keys():
            if k >= rank:
                errors.append(BadSplitDim(f"subgroup {g}: split dim {k} out of range for rank {rank}"))
    if anno.hdim < PARTIAL or anno.hdim >= rank:
        errors.append(BadSplitDim(f"hdim {anno.hdim} out of range for rank {rank}"))
    if anno.hsplit_ratios is not None:
        ratios = anno.hsplit_ratios
        if anno.hdim < 0:
            errors.append(InvalidRatios("hsplit_ratios given but hdim is not a split"))
        if len(ratios) != anno.hsize:
            errors.append(CardinalityMismatch(f"{len(ratios)} ratios for hsize {anno.hsize}"))
        elif any(r <= 0 for r in ratios) or sum(ratios) != 1:
            errors.append(InvalidRatios(f"ratios {ratios} must be positive and sum to 1"))
    return errors


def validate_structure(anno: HetAnnotation, rank: int) -> HetAnnotation:
    errs = structural_errors(anno, rank)
    if errs:
        raise errs[0]
    return anno


def validate(anno: HetAnnotation, shape: Sequence[int]) -> list[AnnotationError]:
    """All invariant violations of ``anno`` on a concrete ``shape`` (empty = ok)."""
    errors = structural_errors(anno, len(shape))
    if errors:
        return errors
    if any(int(s) < 1 for s in shape):
        errors.append(IndivisibleSplit(f"non-positive extent in shape {tuple(shape)}"))
        return errors
    top = top_bounds(anno, shape[anno.hdim]) if anno.hdim >= 0 and anno.hsize > 1 else None
    for g, spec in enumerate(anno.ds_union):
        for k, c in spec.entries:
            if k < 0:
                continue
            extent = shape[k]
            if top is not None and k == anno.hdim:
                extent = top[g][1] - top[g][0]
            if extent % c:
                errors.append(IndivisibleSplit(f"subgroup {g}: extent {extent} of dim {k} not divisible by {c}"))
        if top is not None and top[g][1] <= top[g][0]:
            errors.append(IndivisibleSplit(f"subgroup {g} receives an empty slice of dim {anno.hdim}"))
    return errors


def check(anno: HetAnnotation, shape: Sequence[int]) -> HetAnnotation:
    errs = validate(anno, shape)
    if errs:
        raise errs[0]
    return anno


# ---------------------------------------------------------------------------
# placement


def top_bounds(anno: HetAnnotation, size: int) -> list[tuple[int, int]]:
    """Per-subgroup [lo, hi) along ``hdim``; boundaries round down, the last absorbs the rest."""
    cuts = [0]
    acc = Fraction(0)
    for r in anno.ratios()[:-1]:
        acc += r
        cuts.append(math.floor(acc * size))
    cuts.append(size)
    return [(cuts[i], cuts[i + 1]) for i in range(anno.hsize)]


def partial_ordinal(anno: HetAnnotation, g: int, digits: Mapping[int, int]) -> int | None:
    bottom = digits.get(PARTIAL, 0)
    if anno.hdim == PARTIAL and anno.hsize > 1:
        counts = anno.partial_counts()
        return sum(counts[:g]) + bottom
    if anno.ds_union[g].count(PARTIAL) > 1:
        return bottom
    return None


def placement(anno: HetAnnotation, shape: Sequence[int], device: int) -> SliceRegion:
    """The slice of the logical tensor that ``device`` holds."""
    g, index = anno.locate(device)
    bounds = [[0, int(n)] for n in shape]
    if anno.hsize > 1 and anno.hdim >= 0:
        bounds[anno.hdim] = list(top_bounds(anno, int(shape[anno.hdim]))[g])
    spec = anno.ds_union[g]
    digits = spec.digits(index)
    for k, c in spec.entries:
        if k < 0 or c == 1:
            continue
        lo, hi = bounds[k]
        step = (hi - lo) // c
        bounds[k] = [lo + digits[k] * step, lo + (digits[k] + 1) * step]
    return SliceRegion(tuple(tuple(b) for b in bounds), partial_ordinal(anno, g, digits))


def placement_map(anno: HetAnnotation, shape: Sequence[int]) -> dict[int, SliceRegion]:
    return {d: placement(anno, shape, d) for d in anno.devices}


# ---------------------------------------------------------------------------
# hsize conversion and equality


def convert_hsize(anno: HetAnnotation, target: int, hdim: int | None = None) -> HetAnnotation:
    """Refine ``anno`` to ``target`` subgroups without changing any device's slice.

    Factors of the bottom-tier key matching ``hdim`` are peeled into the top
    tier.  ``hdim`` may only be overridden when the top tier is vacuous
    (``hsize == 1``), where it picks which key to peel.
    """
    if target == anno.hsize:
        return anno
    if target < anno.hsize or target % anno.hsize:
        raise NotRefinable(f"cannot refine hsize {anno.hsize} into {target}")
    key = anno.hdim if hdim is None else hdim
    if hdim is not None and anno.hsize > 1 and hdim != anno.hdim:
        raise NotRefinable(f"hdim override {hdim} conflicts with hdim {anno.hdim}")
    t = target // anno.hsize
    dgs: list[DeviceGroup] = []
    dss: list[ShardSpec] = []
    for g, (group, spec) in enumerate(zip(anno.dg_union, anno.ds_union)):
        c = spec.count(key)
        if key not in spec.keys() or c % t:
            raise NotRefinable(f"subgroup {g}: key {key} has count {c}, not divisible by {t}")
        inner = c // t
        for s in range(t):
            members = [d for i, d in enumerate(group) if spec.digits(i)[key] // inner == s]
            dgs.append(DeviceGroup(tuple(members)))
            dss.append(spec.with_count(key, inner))
    ratios = None
    if key >= 0 and anno.hsplit_ratios is not None and anno.hsize > 1:
        ratios = tuple(r / t for r in anno.hsplit_ratios for _ in range(t))
    return HetAnnotation(tuple(dgs), tuple(dss), key, None, ratios)


def canonical(anno: HetAnnotation) -> tuple:
    """Normal form used for structural comparison."""
    hdim = DUPLICATE if anno.hsize == 1 else anno.hdim
    ratios = anno.hsplit_ratios
    if ratios is not None and (hdim < 0 or all(r == ratios[0] for r in ratios)):
        ratios = None
    dss = tuple(s.normalized().entries for s in anno.ds_union)
    return (tuple(g.devices for g in anno.dg_union), dss, hdim, anno.hsize, ratios)


def annotations_equal(a: HetAnnotation, b: HetAnnotation) -> bool:
    return canonical(a) == canonical(b)
