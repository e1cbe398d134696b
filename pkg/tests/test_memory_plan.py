import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fuseq.errors import CapacityError, PlanError
from fuseq.memory_plan import (ALIGNMENT, Arena, IntermediateSpec, allocation_count,
                               arena_acquire, build_plan)


def spec(name, size, first, last):
    return IntermediateSpec(name, size, first, last)


def ranges_disjoint(a, b):
    return a[0] + a[1] <= b[0] or b[0] + b[1] <= a[0]


def intervals_overlap(s, t):
    return s.first_use <= t.last_use and t.first_use <= s.last_use


class TestBuildPlan:
    def test_disjoint_lifetimes_share_one_buffer(self):
        specs = [spec("a", 256, 0, 1), spec("b", 256, 2, 3)]
        plan = build_plan(specs)
        assert plan.assignments["a"] == plan.assignments["b"]
        assert plan.arena_bytes == 256
        assert plan.no_share_bytes == 512

    def test_overlapping_lifetimes_disjoint_ranges(self):
        specs = [spec("a", 256, 0, 3), spec("b", 256, 2, 5)]
        plan = build_plan(specs)
        assert ranges_disjoint(plan.assignments["a"], plan.assignments["b"])
        assert plan.arena_bytes == 512

    def test_duplicate_names_rejected(self):
        with pytest.raises(PlanError):
            build_plan([spec("a", 8, 0, 1), spec("a", 8, 2, 3)])

    def test_empty_rejected(self):
        with pytest.raises(PlanError):
            build_plan([])

    def test_malformed_interval_rejected(self):
        with pytest.raises(PlanError):
            build_plan([spec("a", 8, 3, 1)])
        with pytest.raises(PlanError):
            build_plan([spec("a", 0, 0, 1)])

    def test_deterministic_for_identical_input(self):
        specs = [spec(f"s{i}", 64 * (1 + i % 3), i % 5, i % 5 + 2) for i in range(20)]
        p1, p2 = build_plan(specs), build_plan(specs)
        assert p1 == p2

    def test_alignment_for_aligned_sizes(self):
        specs = [spec("a", 128, 0, 2), spec("b", 192, 1, 3), spec("c", 64, 2, 4)]
        plan = build_plan(specs)
        for off, _ in plan.assignments.values():
            assert off % ALIGNMENT == 0

    def test_arena_never_exceeds_baseline(self):
        # byte-scale sizes where alignment padding would dominate; the
        # planner falls back to a dense unshared layout
        specs = [spec(f"s{i}", 3, 0, 10) for i in range(8)]
        plan = build_plan(specs)
        assert plan.arena_bytes <= plan.no_share_bytes
        specs = [spec(f"s{i}", 100, 0, 10) for i in range(3)]
        plan = build_plan(specs)
        assert plan.arena_bytes <= plan.no_share_bytes

    def test_report_schema(self):
        plan = build_plan([spec("a", 256, 0, 1), spec("b", 128, 0, 2)])
        rep = json.loads(plan.report_json())
        assert set(rep) == {"arena_bytes", "no_share_bytes", "sharing_ratio", "assignments"}
        assert rep["arena_bytes"] <= rep["no_share_bytes"]
        assert rep["sharing_ratio"] == rep["arena_bytes"] / rep["no_share_bytes"]
        names = {a["name"] for a in rep["assignments"]}
        assert names == {"a", "b"}

    @given(st.lists(st.tuples(st.integers(1, 4096), st.integers(0, 30), st.integers(0, 30)),
                    min_size=1, max_size=64),
           st.integers(0, 2 ** 31))
    @settings(max_examples=200)
    def test_property_no_overlapping_share(self, raw, _seed):
        specs = [spec(f"s{i}", size, min(a, b), max(a, b))
                 for i, (size, a, b) in enumerate(raw)]
        plan = build_plan(specs)
        assert plan.arena_bytes <= plan.no_share_bytes
        for i, s in enumerate(specs):
            off, size = plan.assignments[s.name]
            assert off + size <= plan.arena_bytes
            for t in specs[i + 1:]:
                if intervals_overlap(s, t):
                    assert ranges_disjoint(plan.assignments[s.name], plan.assignments[t.name]), \
                        f"{s.name} and {t.name} overlap in time and share bytes"


class TestArena:
    def test_acquire_at_exact_max(self):
        plan = build_plan([spec("x", 64 * 4, 0, 1)])
        arena = Arena(plan)
        t = arena.acquire("x", (8, 8))
        assert t.shape == (8, 8)
        assert t.data.base is not None

    def test_acquire_above_max_capacity_error(self):
        plan = build_plan([spec("x", 64 * 4, 0, 1)])
        arena = Arena(plan)
        with pytest.raises(CapacityError):
            arena.acquire("x", (8, 9))

    def test_unknown_name_plan_error(self):
        arena = Arena(build_plan([spec("x", 64, 0, 1)]))
        with pytest.raises(PlanError):
            arena.acquire("y", (4,))

    def test_module_level_alias(self):
        arena = Arena(build_plan([spec("x", 64, 0, 1)]))
        t = arena_acquire(arena, "x", (16,))
        assert t.shape == (16,)

    def test_shared_names_view_same_bytes(self):
        plan = build_plan([spec("a", 256, 0, 1), spec("b", 256, 2, 3)])
        arena = Arena(plan)
        a = arena.acquire("a", (64,)).data
        a[:] = 7.0
        b = arena.acquire("b", (64,)).data
        assert np.array_equal(b, a)  # same storage, by design

    def test_ten_thousand_acquires_allocate_nothing(self):
        plan = build_plan([spec("x", 4096, 0, 1), spec("y", 4096, 0, 1)])
        arena = Arena(plan)
        before = allocation_count()
        for i in range(10_000):
            arena.acquire("x" if i % 2 else "y", (16, 16))
        assert allocation_count() - before == 0

    def test_arena_creation_is_tracked(self):
        before = allocation_count()
        Arena(build_plan([spec("x", 64, 0, 1)]))
        assert allocation_count() - before == 1
