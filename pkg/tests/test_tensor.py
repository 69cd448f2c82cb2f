import numpy as np
import pytest

from audiomamba import tensor as T
from audiomamba.gradcheck import check_gradients, finite_difference_grad, relative_error
from audiomamba.tensor import Tensor, backward, get_tape


@pytest.fixture(autouse=True)
def clean_tape():
    get_tape().clear()
    yield
    get_tape().clear()


def rand_param(rng, shape, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True, dtype=np.float64)


class TestMatmul:
    def test_identity(self):
        a = Tensor(np.eye(2))
        b = Tensor([[1.0, 2.0], [3.0, 4.0]])
        assert np.allclose((a @ b).data, [[1, 2], [3, 4]])

    def test_projector(self):
        p = Tensor([[1.0, 0.0], [0.0, 0.0]])
        m = Tensor([[5.0, 6.0], [7.0, 8.0]])
        assert np.allclose((p @ m).data, [[5, 6], [0, 0]])

    def test_against_triple_loop(self):
        rng = np.random.default_rng(0)
        a = rng.standard_normal((3, 4)).astype(np.float32)
        b = rng.standard_normal((4, 2)).astype(np.float32)
        expected = np.zeros((3, 2), dtype=np.float64)
        for i in range(3):
            for j in range(2):
                for k in range(4):
                    expected[i, j] += float(a[i, k]) * float(b[k, j])
        got = (Tensor(a) @ Tensor(b)).data
        assert np.max(np.abs(got - expected)) < 1e-6

    def test_shape_mismatch(self):
        with pytest.raises(T.ShapeError):
            Tensor(np.zeros((2, 3))) @ Tensor(np.zeros((4, 2)))

    def test_gradients(self):
        rng = np.random.default_rng(1)
        a = rand_param(rng, (3, 4))
        b = rand_param(rng, (4, 2))
        check_gradients(lambda: (a @ b).sum(), [a, b])


class TestDepthwiseConv:
    def test_identity_kernel(self):
        rng = np.random.default_rng(2)
        x = Tensor(rng.standard_normal((1, 5, 5)))
        k = Tensor(np.ones((1, 1, 1)))
        y = T.depthwise_conv2d(x, k)
        assert np.allclose(y.data, x.data)

    def test_box_sum_interior(self):
        x = Tensor(np.ones((1, 5, 5)))
        k = Tensor(np.ones((1, 3, 3)))
        y = T.depthwise_conv2d(x, k)
        assert y.data[0, 2, 2] == pytest.approx(9.0)

    def test_against_sliding_window_oracle(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((2, 5, 5)).astype(np.float32)
        k = rng.standard_normal((2, 3, 3)).astype(np.float32)
        expected = np.zeros_like(x)
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
        for c in range(2):
            for i in range(5):
                for j in range(5):
                    for di in range(3):
                        for dj in range(3):
                            expected[c, i, j] += xp[c, i + di, j + dj] * k[c, di, dj]
        got = T.depthwise_conv2d(Tensor(x), Tensor(k)).data
        assert np.max(np.abs(got - expected)) < 1e-6

    def test_even_kernel_rejected(self):
        with pytest.raises(T.ConfigurationError):
            T.depthwise_conv2d(Tensor(np.zeros((1, 4, 4))), Tensor(np.zeros((1, 2, 2))))

    def test_gradients(self):
        rng = np.random.default_rng(4)
        x = rand_param(rng, (2, 4, 4))
        k = rand_param(rng, (2, 3, 3))
        b = rand_param(rng, (2,))
        check_gradients(lambda: T.depthwise_conv2d(x, k, b).sum(), [x, k, b])


class TestLayerNorm:
    def test_constant_row(self):
        y = T.layer_norm(Tensor([1.0, 1.0, 1.0]), Tensor(np.ones(3)), Tensor(np.zeros(3)))
        assert np.allclose(y.data, 0.0, atol=1e-4)

    def test_already_normalized(self):
        y = T.layer_norm(Tensor([-1.0, 1.0]), Tensor(np.ones(2)), Tensor(np.zeros(2)))
        assert np.allclose(y.data, [-1.0, 1.0], atol=1e-2)

    def test_moments(self):
        rng = np.random.default_rng(5)
        x = Tensor(rng.standard_normal((6, 16)) * 3 + 1)
        y = T.layer_norm(x, Tensor(np.ones(16)), Tensor(np.zeros(16)), eps=1e-5)
        mean = y.data.mean(axis=-1)
        var = y.data.var(axis=-1)
        assert np.max(np.abs(mean)) < 1e-6
        assert np.max(np.abs(var - 1.0)) < 1e-4

    def test_gradients(self):
        rng = np.random.default_rng(6)
        x = rand_param(rng, (3, 5))
        g = rand_param(rng, (5,))
        b = rand_param(rng, (5,))
        check_gradients(lambda: (T.layer_norm(x, g, b) * Tensor(np.arange(15.0).reshape(3, 5))).sum(),
                        [x, g, b])


class TestActivations:
    def test_silu_zero(self):
        assert T.activation(Tensor([0.0]), "silu").data[0] == 0.0

    def test_sigmoid_zero(self):
        assert T.activation(Tensor([0.0]), "sigmoid").data[0] == pytest.approx(0.5)

    def test_softplus_large(self):
        y = T.activation(Tensor([20.0], dtype=np.float64), "softplus")
        assert y.data[0] == pytest.approx(20.000000002061153, abs=1e-9)

    def test_softplus_overflow_safe(self):
        y = T.activation(Tensor([1000.0, -1000.0]), "softplus")
        assert np.isfinite(y.data).all()
        assert y.data[0] == pytest.approx(1000.0)
        assert y.data[1] == pytest.approx(0.0)

    def test_unknown_kind(self):
        with pytest.raises(T.ConfigurationError):
            T.activation(Tensor([0.0]), "relu6")

    @pytest.mark.parametrize("kind", ["silu", "gelu", "sigmoid", "softplus"])
    def test_gradients(self, kind):
        rng = np.random.default_rng(7)
        x = rand_param(rng, (8,))
        check_gradients(lambda: (T.activation(x, kind) * x).sum(), [x])


class TestBackward:
    def test_sum_grad(self):
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        backward(x.sum())
        assert np.allclose(x.grad, [1.0, 1.0, 1.0])

    def test_quadratic_grad(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        backward((x * x).sum())
        assert np.allclose(x.grad, [2.0, 4.0])

    def test_non_scalar_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(T.UsageError):
            backward(x * x)

    def test_double_backward_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        loss = (x * x).sum()
        backward(loss)
        with pytest.raises(T.UsageError):
            backward(loss)

    def test_tape_cleared_after_backward(self):
        x = Tensor([1.0], requires_grad=True)
        backward((x * x).sum())
        assert len(get_tape()) == 0

    def test_deterministic_grads(self):
        rng = np.random.default_rng(8)
        xd = rng.standard_normal((4, 4))
        wd = rng.standard_normal((4, 4))

        def run():
            get_tape().clear()
            x = Tensor(xd.copy(), requires_grad=True)
            w = Tensor(wd.copy(), requires_grad=True)
            backward(((x @ w) * (x @ w)).sum())
            return x.grad.copy(), w.grad.copy()

        g1, g2 = run(), run()
        assert np.array_equal(g1[0], g2[0])
        assert np.array_equal(g1[1], g2[1])

    def test_broadcast_grads(self):
        rng = np.random.default_rng(9)
        x = rand_param(rng, (3, 4))
        b = rand_param(rng, (4,))
        check_gradients(lambda: ((x + b) * (x + b)).sum(), [x, b])

    def test_negative_control(self):
        rng = np.random.default_rng(10)
        x = rand_param(rng, (4,))
        with pytest.raises(AssertionError):
            check_gradients(lambda: (x * x).sum(), [x], corrupt=True)


class TestShapeOps:
    def test_take_rows_grad(self):
        rng = np.random.default_rng(11)
        x = rand_param(rng, (5, 3))
        idx = np.array([4, 0, 0, 2])
        check_gradients(lambda: (T.take_rows(x, idx) * T.take_rows(x, idx)).sum(), [x])

    def test_concat_stack_transpose_grads(self):
        rng = np.random.default_rng(12)
        a = rand_param(rng, (2, 3))
        b = rand_param(rng, (2, 3))

        def f():
            c = T.concatenate([a, b], axis=0)
            s = T.stack([a, b], axis=0)
            return (T.transpose(c, (1, 0)) * T.transpose(c, (1, 0))).sum() + (s * s).sum()

        check_gradients(f, [a, b])


def test_finite_difference_helper_matches_analytic():
    rng = np.random.default_rng(13)
    x = rand_param(rng, (5,))
    get_tape().clear()
    loss = (x * x * x).sum()
    backward(loss)
    fd = finite_difference_grad(lambda: (x * x * x).sum(), x)
    assert relative_error(x.grad, fd) < 1e-6
