import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fuseq.errors import AliasingError, DimensionError
from fuseq.tensor import OpCounters, Tensor, gemm, gemm_batched, read_counters, reset_counters

from reference import gemm_ref, relative_error


def f32(a):
    return np.asarray(a, dtype=np.float32)


class TestTensorView:
    def test_never_owns_storage(self):
        base = np.zeros(16, np.float32)
        t = Tensor(base)
        assert t.data.base is base

    def test_shape_and_strides_row_major(self):
        base = np.zeros(24, np.float32)
        t = Tensor(base.reshape(4, 6))
        assert t.shape == (4, 6)
        assert t.strides == (6, 1)


class TestGemm:
    def test_identity(self):
        a = f32(np.eye(2))
        b = f32([[3.0, 1.0], [2.0, 5.0]])
        out = np.empty((2, 2), np.float32)
        gemm(a, b, out)
        assert np.array_equal(out, b)

    def test_known_product(self):
        a = f32([[1, 2], [3, 4]])
        b = f32([[5, 6], [7, 8]])
        out = np.empty((2, 2), np.float32)
        gemm(a, b, out)
        assert np.array_equal(out, f32([[19, 22], [43, 50]]))

    def test_zero_annihilates(self):
        a = np.zeros((3, 4), np.float32)
        b = f32(np.random.default_rng(0).normal(size=(4, 5)))
        out = np.full((3, 5), 7.0, np.float32)
        gemm(a, b, out)
        assert np.array_equal(out, np.zeros((3, 5), np.float32))

    @pytest.mark.parametrize("m,k,n", [(1, 1, 1), (7, 13, 5), (64, 64, 64), (256, 256, 256)])
    def test_matches_triple_loop_oracle(self, m, k, n):
        rng = np.random.default_rng(m * 1000 + k * 10 + n)
        a = f32(rng.normal(size=(m, k)))
        b = f32(rng.normal(size=(k, n)))
        out = np.empty((m, n), np.float32)
        gemm(a, b, out)
        assert relative_error(out, gemm_ref(a.astype(np.float64), b.astype(np.float64))) <= 1e-6

    def test_transpose_b_matches_explicit_transpose(self):
        rng = np.random.default_rng(3)
        a = f32(rng.normal(size=(5, 8)))
        b = f32(rng.normal(size=(6, 8)))
        out_t = np.empty((5, 6), np.float32)
        out_e = np.empty((5, 6), np.float32)
        gemm(a, b, out_t, transpose_b=True)
        gemm(a, np.ascontiguousarray(b.T), out_e)
        assert relative_error(out_t, out_e) <= 1e-6

    def test_accumulate(self):
        a = f32([[1.0, 0.0], [0.0, 1.0]])
        b = f32([[2.0, 0.0], [0.0, 2.0]])
        out = f32([[1.0, 1.0], [1.0, 1.0]])
        gemm(a, b, out, accumulate=True)
        assert np.array_equal(out, f32([[3.0, 1.0], [1.0, 3.0]]))

    def test_shape_mismatch_raises(self):
        with pytest.raises(DimensionError):
            gemm(np.zeros((2, 3), np.float32), np.zeros((4, 5), np.float32),
                 np.zeros((2, 5), np.float32))
        with pytest.raises(DimensionError):
            gemm(np.zeros((2, 3), np.float32), np.zeros((3, 5), np.float32),
                 np.zeros((2, 4), np.float32))

    def test_aliasing_raises(self):
        buf = np.zeros((4, 4), np.float32)
        with pytest.raises(AliasingError):
            gemm(buf, np.ones((4, 4), np.float32), buf)
        arena = np.zeros(64, np.float32)
        a = arena[:16].reshape(4, 4)
        out = arena[8:24].reshape(4, 4)  # overlaps a
        with pytest.raises(AliasingError):
            gemm(a, np.ones((4, 4), np.float32), out)

    def test_disjoint_arena_slices_allowed(self):
        arena = np.zeros(64, np.float32)
        a = arena[:16].reshape(4, 4)
        b = arena[16:32].reshape(4, 4)
        out = arena[32:48].reshape(4, 4)
        a[:] = np.eye(4)
        b[:] = 2.0
        gemm(a, b, out)
        assert np.array_equal(out, b)

    @given(st.integers(1, 24), st.integers(1, 24), st.integers(1, 24), st.integers(0, 999))
    @settings(max_examples=40)
    def test_property_matches_oracle(self, m, k, n, seed):
        rng = np.random.default_rng(seed)
        a = f32(rng.normal(size=(m, k)))
        b = f32(rng.normal(size=(k, n)))
        out = np.empty((m, n), np.float32)
        gemm(a, b, out)
        assert relative_error(out, gemm_ref(a.astype(np.float64), b.astype(np.float64))) <= 1e-6


class TestGemmBatched:
    def test_matches_per_slice_gemm(self):
        rng = np.random.default_rng(11)
        a = f32(rng.normal(size=(3, 4, 5)))
        b = f32(rng.normal(size=(3, 5, 6)))
        out = np.empty((3, 4, 6), np.float32)
        c = OpCounters()
        gemm_batched(a, b, out, counters=c)
        assert c.gemm_calls == 1  # one strided-batched call
        for i in range(3):
            ref = np.empty((4, 6), np.float32)
            gemm(a[i], b[i], ref)
            assert np.allclose(out[i], ref)

    def test_strided_output_view(self):
        rng = np.random.default_rng(12)
        a = f32(rng.normal(size=(2, 3, 4, 5)))
        b = f32(rng.normal(size=(2, 3, 5, 8)))
        buf = np.zeros(2 * 4 * 3 * 8, np.float32)
        view = buf.reshape(2, 4, 3, 8).transpose(0, 2, 1, 3)
        gemm_batched(a, b, view)
        assert np.allclose(view, np.matmul(a, b))


class TestCounters:
    def test_reset_then_three_gemms(self):
        c = OpCounters()
        a = np.eye(3, dtype=np.float32)
        out = np.empty((3, 3), np.float32)
        for _ in range(3):
            gemm(a, a, out, counters=c)
        assert c.gemm_calls == 3

    def test_reset_zeroes_everything(self):
        reset_counters()
        snap = read_counters()
        assert snap.gemm_calls == 0
        assert snap.fused_passes == 0
        assert snap.naive_passes == 0
        assert snap.bytes_moved_estimate == 0

    def test_counter_deltas_deterministic(self):
        def run():
            c = OpCounters()
            rng = np.random.default_rng(5)
            a = f32(rng.normal(size=(8, 8)))
            out = np.empty((8, 8), np.float32)
            gemm(a, a, out, counters=c)
            gemm(a, out.copy(), out, counters=c)
            return c.snapshot()

        s1, s2 = run(), run()
        assert s1 == s2

    def test_monotonic_between_resets(self):
        c = OpCounters()
        a = np.eye(2, dtype=np.float32)
        out = np.empty((2, 2), np.float32)
        last = c.snapshot()
        for _ in range(4):
            gemm(a, a, out, counters=c)
            snap = c.snapshot()
            assert snap.gemm_calls >= last.gemm_calls
            assert snap.bytes_moved_estimate >= last.bytes_moved_estimate
            last = snap
