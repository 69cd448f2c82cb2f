import numpy as np
import pytest

from audiomamba import scan as S
from audiomamba import tensor as T
from audiomamba.gradcheck import check_gradients
from audiomamba.tensor import Tensor, get_tape


@pytest.fixture(autouse=True)
def clean_tape():
    get_tape().clear()
    yield
    get_tape().clear()


def params64(seed, dim, state):
    rng = np.random.default_rng(seed)
    return S.init_scan_params(rng, dim, state, dtype=np.float64)


def oracle_scan(params, x):
    """Independent step-by-step re-derivation of the S6 scan in float64."""
    x = np.asarray(x, dtype=np.float64)
    L, D = x.shape
    N = params.state_size
    Wd = params.W_delta_down.data.astype(np.float64)
    Wu = params.W_delta_up.data.astype(np.float64)
    bias = params.delta_bias.data.astype(np.float64)
    A = -np.exp(params.A_log.data.astype(np.float64))
    y = np.zeros((L, D))
    h = np.zeros((D, N))
    for t in range(L):
        logits = Wu.T @ (Wd.T @ x[t]) + bias
        delta = np.log1p(np.exp(-np.abs(logits))) + np.maximum(logits, 0)
        Bt = params.W_B.data.astype(np.float64).T @ x[t]
        Ct = params.W_C.data.astype(np.float64).T @ x[t]
        for d in range(D):
            for n in range(N):
                h[d, n] = np.exp(delta[d] * A[d, n]) * h[d, n] + delta[d] * Bt[n] * x[t, d]
        y[t] = h @ Ct + params.D_skip.data.astype(np.float64) * x[t]
    return y


class TestDiscretize:
    def test_a_zero_limit(self):
        p = params64(0, 2, 3)
        p.A_log.data[:] = -60.0  # A ~ 0
        Abar, _ = S.discretize(p, np.ones(2), np.full(2, 0.5), np.ones(3))
        assert np.allclose(Abar, 1.0)

    def test_delta_small_limit(self):
        p = params64(1, 2, 3)
        Abar, Bx = S.discretize(p, np.ones(2), np.full(2, 1e-12), np.ones(3))
        assert np.allclose(Abar, 1.0)
        assert np.allclose(Bx, 0.0, atol=1e-11)

    def test_nonpositive_delta_rejected(self):
        p = params64(2, 2, 3)
        with pytest.raises(ValueError):
            S.discretize(p, np.ones(2), np.zeros(2), np.ones(3))

    def test_matches_formula(self):
        p = params64(3, 2, 3)
        rng = np.random.default_rng(4)
        x = rng.standard_normal(2)
        delta = np.abs(rng.standard_normal(2)) + 0.1
        B = rng.standard_normal(3)
        Abar, Bx = S.discretize(p, x, delta, B)
        A = -np.exp(p.A_log.data)
        for d in range(2):
            for n in range(3):
                assert Abar[d, n] == pytest.approx(np.exp(delta[d] * A[d, n]), rel=1e-12)
                assert Bx[d, n] == pytest.approx(delta[d] * B[n] * x[d], rel=1e-12)


class TestSequentialScan:
    def test_single_step_closed_form(self):
        p = params64(5, 3, 4)
        rng = np.random.default_rng(6)
        x = rng.standard_normal((1, 3))
        y = S.scan_sequential(p, x)
        # y_1[d] = sum_n C[n] * Delta[d] * B[n] * x[d] * exp-free h + D*x
        delta, B, C = S._project_inputs(p, x)
        expected = np.zeros(3)
        for d in range(3):
            for n in range(4):
                Abar = np.exp(delta[0, d] * (-np.exp(p.A_log.data[d, n])))
                h = delta[0, d] * B[0, n] * x[0, d]  # h_0 = 0, so Abar drops out
                expected[d] += C[0, n] * h
            expected[d] += p.D_skip.data[d] * x[0, d]
        assert np.allclose(y[0], expected, rtol=1e-10)

    def test_cumsum_limit(self):
        # A ~ 0, delta = B = C = 1 via controlled params, D_skip = 0, N = 1
        p = params64(7, 1, 1)
        p.A_log.data[:] = -60.0
        p.W_delta_down.data[:] = 0.0
        p.delta_bias.data[:] = np.log(np.e - 1.0)  # softplus -> 1
        p.W_B.data[:] = 1.0
        p.W_C.data[:] = 1.0
        p.D_skip.data[:] = 0.0
        x = np.ones((8, 1))
        y = S.scan_sequential(p, x)
        assert np.allclose(y[:, 0], np.cumsum(x[:, 0]), rtol=1e-10)

    def test_matches_independent_oracle(self):
        p = params64(8, 4, 4)
        rng = np.random.default_rng(9)
        x = rng.standard_normal((16, 4))
        y = S.scan_sequential(p, x)
        ref = oracle_scan(p, x)
        rel = np.max(np.abs(y - ref)) / np.max(np.abs(ref))
        assert rel < 1e-5


class TestChunkedScan:
    @pytest.mark.parametrize("chunk", [1, 16])
    def test_degenerate_and_full_chunk(self, chunk):
        p = params64(10, 3, 4)
        rng = np.random.default_rng(11)
        x = rng.standard_normal((16, 3))
        y_seq = S.scan_sequential(p, x)
        y_chk = S.scan_chunked(p, x, chunk=chunk if chunk != 16 else 16)
        assert np.max(np.abs(y_seq - y_chk)) < 1e-6 * max(1.0, np.max(np.abs(y_seq)))

    @pytest.mark.parametrize("chunk", [4, 16, 32])
    def test_oracle_equivalence_sweep(self, chunk):
        p = params64(12, 4, 8)
        rng = np.random.default_rng(13)
        x = rng.standard_normal((128, 4))
        y_seq = S.scan_sequential(p, x)
        y_chk = S.scan_chunked(p, x, chunk=chunk)
        rel = np.max(np.abs(y_seq - y_chk)) / np.max(np.abs(y_seq))
        assert rel < 1e-5

    def test_unaligned_length(self):
        p = params64(14, 2, 4)
        rng = np.random.default_rng(15)
        x = rng.standard_normal((37, 2))
        assert np.allclose(S.scan_chunked(p, x, chunk=8), S.scan_sequential(p, x), rtol=1e-8)

    def test_associativity_bracketing(self):
        # composing chunk-local pairs in any bracketing equals the sequential result
        rng = np.random.default_rng(16)
        a = np.exp(-np.abs(rng.standard_normal((8, 3))))
        b = rng.standard_normal((8, 3))
        pairs = [(a[t], b[t]) for t in range(8)]
        left = pairs[0]
        for t in range(1, 8):
            left = S.compose_pairs(left, pairs[t])
        # right-assoc grouping: ((p0 p1)(p2 p3))((p4 p5)(p6 p7))
        q01 = S.compose_pairs(pairs[0], pairs[1])
        q23 = S.compose_pairs(pairs[2], pairs[3])
        q45 = S.compose_pairs(pairs[4], pairs[5])
        q67 = S.compose_pairs(pairs[6], pairs[7])
        tree = S.compose_pairs(S.compose_pairs(q01, q23), S.compose_pairs(q45, q67))
        seq = S.sequential_recurrence(a, b)[-1]
        assert np.allclose(left[1], seq, rtol=1e-12)
        assert np.allclose(tree[1], seq, rtol=1e-12)

    def test_stability_zero_input(self):
        # with A < 0 and positive delta, state magnitude decays under zero drive
        rng = np.random.default_rng(17)
        a = np.exp(-np.abs(rng.standard_normal((32, 4))) - 1e-3)
        b = np.zeros((32, 4))
        b[0] = rng.standard_normal(4)
        h = S.sequential_recurrence(a, b)
        norms = np.linalg.norm(h, axis=1)
        assert np.all(np.diff(norms) <= 1e-12)


class TestSelectiveScanForward:
    def test_zero_input_zero_output(self):
        p = params64(18, 3, 4)
        y = S.selective_scan_forward(p, Tensor(np.zeros((5, 3), dtype=np.float64)))
        assert np.allclose(y.data, 0.0)

    def test_shape_contract(self):
        rng = np.random.default_rng(19)
        for L, D in [(1, 1), (7, 3), (33, 5)]:
            p = S.init_scan_params(rng, D, 4)
            y = S.selective_scan_forward(p, Tensor(rng.standard_normal((L, D)).astype(np.float32)))
            assert y.shape == (L, D)

    def test_matches_numpy_paths(self):
        p = params64(20, 4, 4)
        rng = np.random.default_rng(21)
        xd = rng.standard_normal((24, 4))
        y = S.selective_scan_forward(p, Tensor(xd))
        assert np.allclose(y.data, S.scan_sequential(p, xd), rtol=1e-8)

    def test_gradients_vs_finite_differences(self):
        p = params64(22, 2, 2)
        rng = np.random.default_rng(23)
        x = Tensor(rng.standard_normal((8, 2)), requires_grad=True, dtype=np.float64)

        def f():
            y = S.selective_scan_forward(p, x, chunk=4)
            return (y * y).sum()

        check_gradients(f, [x, p.A_log, p.delta_bias, p.W_B, p.W_C, p.D_skip,
                            p.W_delta_down, p.W_delta_up])


class TestCrossScanMerge:
    def test_1x1_map(self):
        f = Tensor(np.array([[[3.0]], [[4.0]]]))
        seqs = S.cross_scan(f)
        for s in seqs:
            assert s.shape == (1, 2)
            assert np.allclose(s.data, [[3.0, 4.0]])

    def test_2x2_orders(self):
        f = Tensor(np.array([[[1.0, 2.0], [3.0, 4.0]]]))
        seqs = [s.data[:, 0].tolist() for s in S.cross_scan(f)]
        assert seqs[0] == [1, 2, 3, 4]      # row_forward
        assert seqs[1] == [4, 3, 2, 1]      # row_reverse
        assert seqs[2] == [1, 3, 2, 4]      # col_forward
        assert seqs[3] == [4, 2, 3, 1]      # col_reverse

    def test_constant_map_symmetry(self):
        f = Tensor(np.full((3, 2, 2), 7.0))
        seqs = S.cross_scan(f)
        for s in seqs[1:]:
            assert np.array_equal(s.data, seqs[0].data)

    def test_merge_inverts_scan(self):
        rng = np.random.default_rng(24)
        f = Tensor(rng.standard_normal((2, 3, 3)))
        merged = S.cross_merge(S.cross_scan(f), 3, 3)
        assert np.allclose(merged.data, 4.0 * f.data, rtol=1e-6)

    def test_zero_sequences(self):
        zeros = [Tensor(np.zeros((6, 2))) for _ in range(4)]
        assert np.allclose(S.cross_merge(zeros, 2, 3).data, 0.0)

    def test_length_mismatch(self):
        bad = [Tensor(np.zeros((5, 2)))] * 4
        with pytest.raises(T.ShapeError):
            S.cross_merge(bad, 2, 3)

    def test_permutations_are_bijections(self):
        for order in S.SCAN_ORDERS:
            perm = S.scan_order_permutation(order, 3, 5)
            assert sorted(perm.tolist()) == list(range(15))
            inv = S.inverse_permutation(perm)
            assert np.array_equal(perm[inv], np.arange(15))


class TestSS2D:
    def test_1x1_spatial(self):
        p = [params64(s, 3, 2) for s in range(4)]
        rng = np.random.default_rng(25)
        f = Tensor(rng.standard_normal((3, 1, 1)))
        y = S.ss2d_forward(p, f)
        expected = sum(S.scan_sequential(pi, f.data.reshape(1, 3)) for pi in p)
        assert np.allclose(y.data.reshape(1, 3), expected, rtol=1e-8)

    def test_constant_input_branch_symmetry(self):
        # shared params + constant map: row_forward and col_forward see the
        # same value sequence, so their branch outputs agree
        p = params64(26, 2, 3)
        f = Tensor(np.full((2, 3, 3), 0.5))
        seqs = S.cross_scan(f)
        y_row = S.selective_scan_forward(p, seqs[0])
        y_col = S.selective_scan_forward(p, seqs[2])
        assert np.allclose(y_row.data, y_col.data, rtol=1e-10)

    def test_shape_preserved(self):
        rng = np.random.default_rng(27)
        p = [S.init_scan_params(rng, 4, 2) for _ in range(4)]
        f = Tensor(rng.standard_normal((4, 5, 3)).astype(np.float32))
        assert S.ss2d_forward(p, f).shape == (4, 5, 3)

    def test_gradients_vs_finite_differences(self):
        p = [params64(30 + s, 3, 2) for s in range(4)]
        rng = np.random.default_rng(28)
        f = Tensor(rng.standard_normal((3, 2, 2)), requires_grad=True, dtype=np.float64)

        def fn():
            y = S.ss2d_forward(p, f, chunk=2)
            return (y * y).sum()

        check_gradients(fn, [f, p[0].A_log, p[1].W_B, p[2].delta_bias, p[3].W_C])
