from __future__ import annotations

import itertools
from collections import Counter
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fixtures import cells, random_annotation
from hetshard.annotation import (
    DUPLICATE,
    PARTIAL,
    HetAnnotation,
    ShardSpec,
    SliceRegion,
    annotations_equal,
    check,
    convert_hsize,
    placement,
    placement_map,
    top_bounds,
    validate,
)
from hetshard.errors import (
    BadSplitDim,
    CardinalityMismatch,
    DeviceNotInAnnotation,
    IndivisibleSplit,
    NotRefinable,
    OverlappingSubgroups,
)

seeds = st.integers(0, 2**32 - 1)


def region(*bounds, partial=None):
    return SliceRegion(tuple(bounds), partial)


class TestValidate:
    def test_split_and_duplicate(self):
        assert validate(HetAnnotation.spmd([0, 1, 2, 3], {0: 2, -1: 2}), [8, 4]) == []

    def test_cardinality(self):
        errs = validate(HetAnnotation.spmd([0, 1, 2, 3], {0: 3}), [6])
        assert isinstance(errs[0], CardinalityMismatch)

    def test_overlap(self):
        errs = validate(HetAnnotation.make([[0, 1], [1, 2]], [{0: 2}, {0: 2}], 0), [4])
        assert any(isinstance(e, OverlappingSubgroups) for e in errs)

    def test_bad_dim(self):
        errs = validate(HetAnnotation.spmd([0, 1], {2: 2}), [4, 4])
        assert isinstance(errs[0], BadSplitDim)

    def test_indivisible(self):
        errs = validate(HetAnnotation.spmd([0, 1, 2], {0: 3}), [4])
        assert isinstance(errs[0], IndivisibleSplit)

    def test_check_raises_first(self):
        with pytest.raises(CardinalityMismatch):
            check(HetAnnotation.spmd([0, 1, 2, 3], {0: 3}), [6])

    def test_ratios_only_with_split_hdim(self):
        anno = HetAnnotation.make([[0], [1]], [{-1: 1}, {-1: 1}], DUPLICATE, ["1/2", "1/2"])
        assert validate(anno, [4])

    @pytest.mark.parametrize("ratios", [["1/2", "1/3"], ["0", "1"], ["3/2", "-1/2"]])
    def test_bad_ratios(self, ratios):
        anno = HetAnnotation.make([[0], [1]], [{-1: 1}, {-1: 1}], 0, ratios)
        assert validate(anno, [6])

    def test_repeated_key(self):
        with pytest.raises(Exception):
            ShardSpec([(0, 2), (0, 2)])


class TestPlacement:
    def test_uniform_quarter(self):
        anno = HetAnnotation.spmd([0, 1, 2, 3], {0: 4})
        assert placement(anno, [8, 2], 2) == region((4, 6), (0, 2))

    def test_two_tier_ratios(self):
        anno = HetAnnotation.make([[0, 1], [2]], [{1: 2}, {-1: 1}], 0, ["1/2", "1/2"])
        assert placement(anno, [4, 4], 1) == region((0, 2), (2, 4))
        assert placement(anno, [4, 4], 2) == region((2, 4), (0, 4))

    def test_full_replication_across_subgroups(self):
        anno = HetAnnotation.make([[0, 1], [2]], [{1: 2}, {-1: 1}], DUPLICATE)
        assert placement(anno, [4, 4], 2) == region((0, 4), (0, 4))

    def test_row_major_digits(self):
        # entries enumerate row-major: the last key varies fastest
        anno = HetAnnotation.spmd([0, 1, 2, 3], {0: 2, 1: 2})
        got = [placement(anno, [4, 4], d).bounds for d in range(4)]
        assert got == [((0, 2), (0, 2)), ((0, 2), (2, 4)), ((2, 4), (0, 2)), ((2, 4), (2, 4))]

    def test_partial_ordinals(self):
        anno = HetAnnotation.spmd([0, 1, 2, 3], {-2: 2, 0: 2})
        assert [placement(anno, [4], d).partial for d in range(4)] == [0, 0, 1, 1]

    def test_top_partial_ordinals_continue_across_subgroups(self):
        anno = HetAnnotation.make([[0, 1], [2]], [{-2: 2}, {-1: 1}], PARTIAL)
        assert [placement(anno, [4], d).partial for d in (0, 1, 2)] == [0, 1, 2]

    def test_nonuniform_bounds_round_down(self):
        anno = HetAnnotation.make([[0], [1], [2]], [{-1: 1}] * 3, 0, ["1/3", "1/3", "1/3"])
        assert top_bounds(anno, 10) == [(0, 3), (3, 6), (6, 10)]

    def test_unknown_device(self):
        with pytest.raises(DeviceNotInAnnotation):
            placement(HetAnnotation.spmd([0, 1], {0: 2}), [4], 5)

    @settings(max_examples=150, deadline=None)
    @given(seeds)
    def test_tiling(self, seed):
        rng = np.random.default_rng(seed)
        shape = tuple(int(rng.choice([2, 4, 6, 8])) for _ in range(int(rng.integers(1, 3))))
        devices = sorted(rng.choice(8, size=int(rng.integers(1, 9)), replace=False).tolist())
        anno = random_annotation(rng, devices, shape)
        # every (subgroup, ordinal) covers its top-tier region exactly dup times
        for g, (dg, ds) in enumerate(zip(anno.dg_union, anno.ds_union)):
            lo_hi = [(0, n) for n in shape]
            if anno.hsize > 1 and anno.hdim >= 0:
                lo_hi[anno.hdim] = top_bounds(anno, shape[anno.hdim])[g]
            expected = set(itertools.product(*[range(a, b) for a, b in lo_hi]))
            counts: dict = {}
            for d in dg:
                r = placement(anno, shape, d)
                for c in itertools.product(*[range(a, b) for a, b in r.bounds]):
                    counts.setdefault(r.partial, Counter())[c] += 1
            for per_cell in counts.values():
                assert set(per_cell) == expected
                assert set(per_cell.values()) == {ds.count(DUPLICATE)}

    @settings(max_examples=50, deadline=None)
    @given(seeds)
    def test_deterministic_and_total(self, seed):
        rng = np.random.default_rng(seed)
        anno = random_annotation(rng, range(6), (8, 4))
        assert placement_map(anno, (8, 4)) == placement_map(anno, (8, 4))
        assert set(placement_map(anno, (8, 4))) == set(anno.devices)


class TestConvertHsize:
    def test_split_refinement(self):
        anno = HetAnnotation.spmd([0, 1, 2, 3], {0: 4})
        out = convert_hsize(anno, 2, hdim=0)
        assert out == HetAnnotation.make([[0, 1], [2, 3]], [{0: 2}, {0: 2}], 0)
        assert placement_map(out, [8]) == placement_map(anno, [8])

    def test_duplicate_refinement(self):
        out = convert_hsize(HetAnnotation.spmd([0, 1, 2, 3], {-1: 4}), 4)
        assert [list(g) for g in out.dg_union] == [[0], [1], [2], [3]]
        assert all(s.entries == ((DUPLICATE, 1),) for s in out.ds_union)
        assert out.hdim == DUPLICATE

    def test_not_refinable(self):
        with pytest.raises(NotRefinable):
            convert_hsize(HetAnnotation.spmd([0, 1, 2], {0: 3}), 2, hdim=0)

    def test_identity(self):
        anno = HetAnnotation.make([[0, 1], [2, 3]], [{0: 2}, {-1: 2}], 0)
        assert convert_hsize(anno, 2) == anno

    def test_nonuniform_top(self):
        anno = HetAnnotation.make([[0, 1], [2, 3]], [{0: 2}, {0: 2}], 0, ["1/4", "3/4"])
        out = convert_hsize(anno, 4)
        assert out.ratios() == (Fraction(1, 8), Fraction(1, 8), Fraction(3, 8), Fraction(3, 8))
        assert placement_map(out, [16]) == placement_map(anno, [16])

    def test_target_not_multiple(self):
        anno = HetAnnotation.make([[0, 1], [2]], [{0: 2}, {-1: 1}], 0)
        with pytest.raises(NotRefinable):
            convert_hsize(anno, 3)


class TestEquality:
    def test_reflexive(self):
        a = HetAnnotation.make([[0, 1], [2]], [{0: 2}, {-1: 1}], 0, ["1/3", "2/3"])
        assert annotations_equal(a, a)

    def test_unit_elision(self):
        assert annotations_equal(HetAnnotation.spmd([0, 1], {0: 2, -1: 1}), HetAnnotation.spmd([0, 1], {0: 2}))

    def test_hdim_differs(self):
        a = HetAnnotation.make([[0], [1]], [{-1: 1}] * 2, 0)
        assert not annotations_equal(a, a.replace(hdim=DUPLICATE))

    def test_uniform_ratios_equal_default(self):
        a = HetAnnotation.make([[0], [1]], [{-1: 1}] * 2, 0)
        assert annotations_equal(a, a.replace(hsplit_ratios=("1/2", "1/2")))


class TestJson:
    @settings(max_examples=60, deadline=None)
    @given(seeds)
    def test_round_trip(self, seed):
        rng = np.random.default_rng(seed)
        anno = random_annotation(rng, range(8), (12, 4))
        assert HetAnnotation.from_json(anno.to_json()) == anno

    def test_schema(self):
        data = HetAnnotation.make([[0, 1], [2]], [{0: 2}, {-1: 1}], 0, ["1/3", "2/3"]).to_json()
        assert data == {
            "dg_union": [[0, 1], [2]],
            "ds_union": [{"0": 2}, {"-1": 1}],
            "hdim": 0,
            "hsize": 2,
            "hsplit_ratios": ["1/3", "2/3"],
        }

    def test_region_round_trip(self):
        r = region((0, 2), (4, 8), partial=1)
        assert SliceRegion.from_json(r.to_json()) == r
        assert r.shape == (2, 4)


def test_cells_helper():
    assert len(list(cells((2, 3)))) == 6
