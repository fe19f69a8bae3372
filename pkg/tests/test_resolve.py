from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fixtures import random_pair
from hetshard.annotation import DUPLICATE, PARTIAL, DeviceGroup, HetAnnotation, ShardSpec
from hetshard.errors import PartialUnderBsr, UnsupportedHdimTransition
from hetshard.resolve import (
    ALL_GATHER,
    ALL_REDUCE,
    BSR,
    COLLECTIVES,
    IDENTITY,
    REDUCE_SCATTER,
    SEND_RECV,
    SPLIT_ALL_GATHER,
    SPLIT_ALL_REDUCE,
    SPLIT_REDUCE_SCATTER,
    TOP_TIER,
    bottom_resolve,
    classify,
    top_resolve,
)
from hetshard.sim import reassemble, run_plan, scatter

H = HetAnnotation
DG4 = DeviceGroup((0, 1, 2, 3))


def roundtrip(plan, value, rng=None):
    shards, traffic = run_plan(plan, scatter(plan.src, value, rng))
    return reassemble(plan.dst, shards, plan.shape), traffic


class TestBottom:
    @pytest.mark.parametrize(
        "src, dst, kind",
        [
            ({PARTIAL: 4}, {DUPLICATE: 4}, ALL_REDUCE),
            ({PARTIAL: 4}, {0: 4}, REDUCE_SCATTER),
            ({0: 4}, {DUPLICATE: 4}, ALL_GATHER),
        ],
    )
    def test_collective_table(self, src, dst, kind):
        step = bottom_resolve(ShardSpec(src), ShardSpec(dst), DG4, DG4)
        assert step.kind == kind
        assert [g.members for g in step.groups] == [(0, 1, 2, 3)]

    def test_identity(self):
        assert bottom_resolve(ShardSpec({0: 4}), ShardSpec({0: 4}), DG4, DG4).kind == IDENTITY

    def test_send_recv_positional(self):
        step = bottom_resolve(ShardSpec({0: 2}), ShardSpec({0: 2}), DeviceGroup((0, 1)), DeviceGroup((3, 2)))
        assert step.kind == SEND_RECV
        assert step.pairs == [(0, 3), (1, 2)]

    def test_mixed_to_split_is_bsr(self):
        step = bottom_resolve(ShardSpec({0: 2, -1: 2}), ShardSpec({0: 4}), DG4, DG4)
        assert step.kind == BSR

    def test_groups_vary_one_digit(self):
        # all-gather on the inner split: pairs differ only in the key's digit
        step = bottom_resolve(ShardSpec({0: 2, 1: 2}), ShardSpec({0: 2, -1: 2}), DG4, DG4)
        assert step.kind == ALL_GATHER
        assert [g.members for g in step.groups] == [(0, 1), (2, 3)]

    def test_split_to_partial_falls_through(self):
        with pytest.raises(PartialUnderBsr):
            bottom_resolve(ShardSpec({0: 4}), ShardSpec({PARTIAL: 4}), DG4, DG4)

    def test_bsr_plan_correct(self):
        src, dst = H.spmd([0, 1, 2, 3], {0: 2, -1: 2}), H.spmd([0, 1, 2, 3], {0: 4})
        plan = classify(src, dst, (8, 4))
        v = np.arange(32).reshape(8, 4)
        out, traffic = roundtrip(plan, v)
        np.testing.assert_array_equal(out, v)
        assert traffic == plan.predicted_traffic()


class TestTop:
    def two(self, ds, hdim):
        return H.make([[0, 1], [2, 3]], [ds, ds], hdim)

    def test_split_all_reduce(self):
        step = top_resolve(self.two({0: 2}, PARTIAL), self.two({0: 2}, DUPLICATE), (4, 2))
        assert step.kind == SPLIT_ALL_REDUCE
        assert sorted(g.members for g in step.groups) == [(0, 2), (1, 3)]

    def test_split_all_gather(self):
        step = top_resolve(self.two({1: 2}, 0), self.two({1: 2}, DUPLICATE), (4, 4))
        assert step.kind == SPLIT_ALL_GATHER

    def test_split_reduce_scatter(self):
        step = top_resolve(self.two({1: 2}, PARTIAL), self.two({1: 2}, 0), (4, 4))
        assert step.kind == SPLIT_REDUCE_SCATTER

    def test_gather_across_bottom_split_on_hdim(self):
        # gathered pieces would not form one contiguous destination block
        with pytest.raises(UnsupportedHdimTransition):
            top_resolve(self.two({0: 2}, 0), self.two({0: 2}, DUPLICATE), (4, 4))
        assert classify(self.two({0: 2}, 0), self.two({0: 2}, DUPLICATE), (4, 4)).kinds() == [BSR]

    def test_unequal_replicas_reuse_owners(self):
        src = H.make([[6], [7, 1]], [{-1: 1}, {-1: 2}], PARTIAL)
        step = top_resolve(src, src.replace(hdim=DUPLICATE), (4,))
        assert [g.members for g in step.groups] == [(6, 1), (6, 7)]

    @pytest.mark.parametrize("a, b", [(0, PARTIAL), (DUPLICATE, PARTIAL), (DUPLICATE, 0), (0, 1)])
    def test_unsupported(self, a, b):
        with pytest.raises(UnsupportedHdimTransition):
            top_resolve(self.two({-1: 2}, a), self.two({-1: 2}, b), (4, 4))

    @pytest.mark.parametrize(
        "ds, src_h, dst_h, kind",
        [({0: 2}, PARTIAL, DUPLICATE, SPLIT_ALL_REDUCE), ({0: 2}, PARTIAL, 1, SPLIT_REDUCE_SCATTER),
         ({1: 2}, 0, DUPLICATE, SPLIT_ALL_GATHER)],
    )
    def test_execution(self, ds, src_h, dst_h, kind):
        src, dst = self.two(ds, src_h), self.two(ds, dst_h)
        plan = classify(src, dst, (4, 4))
        assert plan.kinds() == [kind]
        v = np.arange(16).reshape(4, 4)
        out, traffic = roundtrip(plan, v, np.random.default_rng(0))
        np.testing.assert_array_equal(out, v)
        assert traffic == plan.predicted_traffic()

    def test_uneven_subgroups_need_alignment(self):
        # different bottom tiers: align to the destination DS, then the top step
        src = H.make([[0, 1], [2]], [{PARTIAL: 2}, {-1: 1}], PARTIAL)
        dst = H.make([[0, 1], [2]], [{-1: 2}, {-1: 1}], DUPLICATE)
        plan = classify(src, dst, (4,))
        assert len(plan.phases) == 2
        assert plan.kinds() == [ALL_REDUCE, IDENTITY, SPLIT_ALL_REDUCE]
        v = np.arange(4)
        out, _ = roundtrip(plan, v, np.random.default_rng(1))
        np.testing.assert_array_equal(out, v)


class TestClassify:
    def test_identity(self):
        a = H.make([[0, 1], [2]], [{0: 2}, {-1: 1}], 0)
        assert classify(a, a, (4, 4)).kinds() == [IDENTITY, IDENTITY]

    def test_shifted_group(self):
        assert classify(H.spmd([0, 1], {0: 2}), H.spmd([2, 3], {0: 2}), (4,)).kinds() == [SEND_RECV]

    def test_hsize_mismatch(self):
        src = H.spmd([0, 1, 2, 3], {0: 4})
        dst = H.make([[0, 1], [2]], [{0: 2}, {-1: 1}], 0)
        assert classify(src, dst, (8,)).kinds() == [BSR]

    def test_hsize_mismatch_partial(self):
        src = H.spmd([0, 1, 2, 3], {PARTIAL: 4})
        dst = H.make([[0, 1], [2]], [{0: 2}, {-1: 1}], 0)
        with pytest.raises(PartialUnderBsr):
            classify(src, dst, (8,))

    def test_json(self):
        plan = classify(H.spmd([0, 1, 2, 3], {PARTIAL: 4}), H.spmd([0, 1, 2, 3], {-1: 4}), (8,))
        data = plan.to_json()
        assert data["version"] == "v1"
        assert [s["kind"] for p in data["phases"] for s in p] == [ALL_REDUCE]

    def test_deterministic(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            src, dst, shape = random_pair(rng, allow_partial=False)
            assert classify(src, dst, shape).to_json() == classify(src, dst, shape).to_json()


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 2**32 - 1), st.booleans())
def test_soundness(seed, integer):
    rng = np.random.default_rng(seed)
    src, dst, shape = random_pair(rng)
    try:
        plan = classify(src, dst, shape)
    except PartialUnderBsr:
        assert src.has_partial or dst.has_partial
        return
    v = rng.integers(-50, 50, size=shape) if integer else rng.standard_normal(shape)
    out, traffic = roundtrip(plan, v, rng)
    if integer:
        np.testing.assert_array_equal(out, v)
    else:
        np.testing.assert_allclose(out, v, rtol=1e-6, atol=1e-9)
    assert traffic == plan.predicted_traffic()


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_collective_structure(seed):
    rng = np.random.default_rng(seed)
    src, dst, shape = random_pair(rng)
    try:
        plan = classify(src, dst, shape)
    except PartialUnderBsr:
        return
    devices = set(src.devices) | set(dst.devices)
    for step in plan.steps:
        assert set(step.devices) <= devices
        if step.kind in COLLECTIVES:
            assert all(len(g.members) >= 2 for g in step.groups)
        if step.kind in TOP_TIER:
            # one member per subgroup, and per-slice groups disjoint
            for g in step.groups:
                subgroups = [src.locate(d)[0] for d in g.members]
                assert len(set(subgroups)) == len(subgroups)
            if len({len(g) for g in src.dg_union}) > 1:
                continue
            seen: dict = {}
            for g in step.groups:
                key = g.region
                assert not set(g.members) & seen.get(key, set())
                seen.setdefault(key, set()).update(g.members)
