import math
import threading

import numpy as np
import pytest

from tipformer import autodiff as ad
from tipformer.errors import ConfigError, DimensionError, UsageError


def t64(a, grad=False):
    return ad.Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad, dtype=np.float64)


def weighted(out, w):
    """Scalar probe: sum(out * w) with a fixed random weight."""
    return ad.sum(ad.mul(out, w))


class TestForwardExamples:
    def test_matmul_identity(self):
        m = t64([[1, 2], [3, 4]])
        np.testing.assert_array_equal(ad.matmul(t64(np.eye(2)), m).data, m.data)

    def test_matmul_hand(self):
        assert ad.matmul(t64([[1, 2]]), t64([[3], [4]])).data.tolist() == [[11.0]]

    def test_matmul_zero(self, rng):
        out = ad.matmul(t64(np.zeros((3, 2))), t64(rng.normal(size=(2, 5))))
        assert not out.data.any()

    def test_matmul_shape_error(self):
        with pytest.raises(DimensionError):
            ad.matmul(t64(np.ones((2, 3))), t64(np.ones((2, 3))))

    def test_conv_identity_kernel(self, rng):
        x = t64(rng.normal(size=(5, 3)))
        out = ad.conv1d(x, t64(np.eye(3)[None]), t64(np.zeros(3)))
        np.testing.assert_array_equal(out.data, x.data)

    def test_conv_hand(self):
        out = ad.conv1d(t64([[1], [2], [3]]), t64(np.ones((3, 1, 1))), t64([0.0]))
        assert out.data[:, 0].tolist() == [3.0, 6.0, 5.0]

    def test_conv_zero_input_gives_bias(self):
        out = ad.conv1d(t64(np.zeros((4, 2))), t64(np.ones((3, 2, 3))), t64([1.0, -2.0, 0.5]))
        np.testing.assert_array_equal(out.data, np.tile([1.0, -2.0, 0.5], (4, 1)))

    def test_conv_even_kernel(self):
        with pytest.raises(ConfigError):
            ad.conv1d(t64(np.zeros((4, 1))), t64(np.ones((2, 1, 1))), t64([0.0]))

    @pytest.mark.parametrize(
        "a, b, expected",
        [([1, 2], [0, 0], [0.5, 1.0]), ([1], [20], [1.0]), ([2], [math.log(3)], [1.5])],
    )
    def test_glu(self, a, b, expected):
        out = ad.glu(t64([a + b]))
        np.testing.assert_allclose(out.data[0], expected, atol=1e-6)

    def test_glu_odd(self):
        with pytest.raises(DimensionError):
            ad.glu(t64([[1.0, 2.0, 3.0]]))

    def test_layer_norm_constant_row(self):
        out = ad.layer_norm(t64([[5, 5, 5]]), t64(np.ones(3)), t64(np.zeros(3)))
        np.testing.assert_array_equal(out.data, np.zeros((1, 3)))

    def test_layer_norm_hand(self):
        out = ad.layer_norm(t64([[1, 2, 3]]), t64(np.ones(3)), t64(np.zeros(3)), eps=1e-12)
        np.testing.assert_allclose(out.data[0], [-1.2247, 0.0, 1.2247], atol=1e-4)

    def test_layer_norm_zero_gamma(self, rng):
        beta = t64([0.1, -0.2, 0.3, 0.4])
        out = ad.layer_norm(t64(rng.normal(size=(3, 4))), t64(np.zeros(4)), beta)
        np.testing.assert_array_equal(out.data, np.tile(beta.data, (3, 1)))

    @pytest.mark.parametrize("x, expected", [([0, 0], [0.5, 0.5]), ([math.log(2), 0], [2 / 3, 1 / 3])])
    def test_softmax(self, x, expected):
        np.testing.assert_allclose(ad.softmax(t64(x)).data, expected, rtol=1e-12)

    def test_softmax_no_overflow(self):
        out = ad.softmax(t64([1000.0, 0.0])).data
        assert np.isfinite(out).all()
        assert out[0] == 1.0 and out[1] < 1e-300

    def test_dropout_eval_is_identity(self, rng):
        x = t64(rng.normal(size=(4, 4)))
        assert ad.dropout(x, 0.5, train=False) is x
        assert ad.dropout(x, 0.0, train=True, rng=rng) is x

    def test_dropout_keep_fraction(self, rng):
        out = ad.dropout(t64(np.ones(100_000)), 0.2, train=True, rng=rng)
        kept = np.count_nonzero(out.data) / out.data.size
        assert abs(kept - 0.8) <= 0.01
        np.testing.assert_allclose(out.data[out.data != 0], 1.25)

    @pytest.mark.parametrize("rate", [-0.1, 1.0, 1.5])
    def test_dropout_bad_rate(self, rate):
        with pytest.raises(ConfigError):
            ad.dropout(t64([1.0]), rate, train=True, rng=np.random.default_rng(0))


class TestBackward:
    def test_sum_product_grad_is_x(self, rng):
        x = rng.normal(size=(3, 4))
        w = t64(np.zeros((3, 4)), grad=True)
        ad.backward(ad.sum(ad.mul(w, t64(x))))
        np.testing.assert_array_equal(w.grad, x)

    def test_square_grad(self):
        w = t64([3.0], grad=True)
        ad.backward(ad.sum(w * w))
        assert w.grad.tolist() == [6.0]

    def test_non_scalar_loss(self):
        w = t64([1.0, 2.0], grad=True)
        with pytest.raises(UsageError):
            ad.backward(w * w)

    def test_second_backward_rejected(self):
        w = t64([1.0], grad=True)
        loss = ad.sum(w * w)
        loss.backward()
        with pytest.raises(UsageError):
            loss.backward()

    def test_reused_node_accumulates(self):
        w = t64([2.0], grad=True)
        y = w * w
        ad.backward(ad.sum(ad.add(y, y)))
        assert w.grad.tolist() == [8.0]

    def test_no_grad_is_thread_local(self):
        seen = {}

        def worker():
            seen["worker"] = ad._grad_enabled()

        with ad.no_grad():
            th = threading.Thread(target=worker)
            th.start()
            th.join()
            seen["main"] = ad._grad_enabled()
        assert seen == {"worker": True, "main": False}
        assert ad._grad_enabled()

    def test_no_grad_records_nothing(self):
        w = t64([1.0], grad=True)
        with ad.no_grad():
            y = w * w
        assert y._node is None and not y.requires_grad

    def test_composite_chain(self, rng):
        x = t64(rng.normal(size=(3, 4)))
        kernel = t64(rng.normal(size=(3, 4, 4)))
        bias = t64(rng.normal(size=4))
        gamma, beta = t64(rng.normal(size=2)), t64(rng.normal(size=2))
        wvec = t64(rng.normal(size=(2, 1)))

        def f(x, kernel, bias, gamma, beta):
            h = ad.layer_norm(ad.glu(ad.conv1d(x, kernel, bias)), gamma, beta)
            s = ad.softmax(ad.reshape(ad.matmul(h, wvec), (3,)))
            return ad.bce(ad.reshape(ad.take_rows(ad.reshape(s, (3, 1)), [0]), ()), 1.0)

        res = ad.grad_check(f, [x, kernel, bias, gamma, beta], h=1e-3, tol=1e-3)
        assert res.passed, res


def _random_shapes(seed, n=20):
    r = np.random.default_rng(seed)
    return [(int(r.integers(1, 6)), int(r.integers(1, 6))) for _ in range(n)]


class TestGradients:
    """Finite-difference checks over 20 random shapes per op (float64)."""

    @pytest.mark.parametrize("shape", _random_shapes(0))
    def test_elementwise(self, shape, rng):
        a, b = t64(rng.normal(size=shape)), t64(rng.normal(size=shape))
        w = rng.normal(size=shape)

        def f(a, b):
            return weighted(ad.sigmoid(ad.sub(ad.mul(a, b), ad.add(a, 0.5))), w)

        assert ad.grad_check(f, [a, b]).passed

    @pytest.mark.parametrize("shape", _random_shapes(1))
    def test_matmul(self, shape, rng):
        n, k = shape
        a, b = t64(rng.normal(size=(n, k))), t64(rng.normal(size=(k, 3)))
        w = rng.normal(size=(n, 3))
        assert ad.grad_check(lambda a, b: weighted(ad.matmul(a, b), w), [a, b]).passed

    @pytest.mark.parametrize("shape", _random_shapes(2))
    def test_batched_matmul(self, shape, rng):
        n, k = shape
        a, b = t64(rng.normal(size=(2, n, k))), t64(rng.normal(size=(2, k, 2)))
        w = rng.normal(size=(2, n, 2))
        assert ad.grad_check(lambda a, b: weighted(ad.matmul(a, b), w), [a, b]).passed

    @pytest.mark.parametrize("shape", _random_shapes(3))
    def test_conv1d(self, shape, rng):
        length, c = shape
        k = [1, 3, 5][length % 3]
        x, ker, bias = t64(rng.normal(size=(length, c))), t64(rng.normal(size=(k, c, 2))), t64(rng.normal(size=2))
        w = rng.normal(size=(length, 2))
        assert ad.grad_check(lambda x, ker, b: weighted(ad.conv1d(x, ker, b), w), [x, ker, bias]).passed

    @pytest.mark.parametrize("shape", _random_shapes(4))
    def test_glu(self, shape, rng):
        x = t64(rng.normal(size=(shape[0], 2 * shape[1])))
        w = rng.normal(size=shape)
        assert ad.grad_check(lambda x: weighted(ad.glu(x), w), x).passed

    @pytest.mark.parametrize("shape", _random_shapes(5))
    def test_layer_norm(self, shape, rng):
        n, d = shape[0], shape[1] + 1
        x, g, b = t64(rng.normal(size=(n, d))), t64(rng.normal(size=d)), t64(rng.normal(size=d))
        w = rng.normal(size=(n, d))
        assert ad.grad_check(lambda x, g, b: weighted(ad.layer_norm(x, g, b), w), [x, g, b]).passed

    @pytest.mark.parametrize("shape", _random_shapes(6))
    def test_softmax(self, shape, rng):
        x = t64(rng.normal(size=shape))
        w = rng.normal(size=shape)
        for axis in (0, -1):
            assert ad.grad_check(lambda x: weighted(ad.softmax(x, axis=axis), w), x).passed

    @pytest.mark.parametrize("shape", _random_shapes(7))
    def test_shape_ops(self, shape, rng):
        a, b = t64(rng.normal(size=shape)), t64(rng.normal(size=shape))
        n, m = shape
        w = rng.normal(size=(m, 2 * n))

        def f(a, b):
            c = ad.transpose(ad.concat([a, b], axis=0))
            return ad.add(weighted(ad.reshape(c, (m, 2 * n)), w), ad.sum(ad.mean(ad.mul(a, a), axis=0)))

        assert ad.grad_check(f, [a, b]).passed

    @pytest.mark.parametrize("shape", _random_shapes(8))
    def test_sum_mean(self, shape, rng):
        x = t64(rng.normal(size=shape))
        w0, w1 = rng.normal(size=shape[1]), rng.normal(size=shape[0])

        def f(x):
            return ad.add(weighted(ad.sum(x, axis=0), w0), weighted(ad.mean(x, axis=1), w1))

        assert ad.grad_check(f, x).passed

    @pytest.mark.parametrize("shape", _random_shapes(9))
    def test_take_rows(self, shape, rng):
        table = t64(rng.normal(size=shape))
        idx = rng.integers(0, shape[0], size=7)
        w = rng.normal(size=(7, shape[1]))
        assert ad.grad_check(lambda t: weighted(ad.take_rows(t, idx), w), table).passed

    @pytest.mark.parametrize("shape", _random_shapes(10))
    def test_row_l2_norm(self, shape, rng):
        x = t64(rng.normal(size=shape))
        w = rng.normal(size=shape[0])
        assert ad.grad_check(lambda x: weighted(ad.row_l2_norm(x), w), x).passed

    @pytest.mark.parametrize("shape", _random_shapes(11))
    def test_bce(self, shape, rng):
        logits = t64(rng.normal(size=shape))
        y = rng.integers(0, 2, size=shape)
        assert ad.grad_check(lambda z: ad.bce(ad.sigmoid(z), y), logits).passed

    @pytest.mark.parametrize("shape", _random_shapes(12))
    def test_linear(self, shape, rng):
        x, wt, b = t64(rng.normal(size=shape)), t64(rng.normal(size=(shape[1], 3))), t64(rng.normal(size=3))
        w = rng.normal(size=(shape[0], 3))
        assert ad.grad_check(lambda x, wt, b: weighted(ad.linear(x, wt, b), w), [x, wt, b]).passed

    def test_zero_row_norm_has_zero_gradient(self):
        x = t64([[0.0, 0.0], [3.0, 4.0]], grad=True)
        ad.backward(ad.sum(ad.row_l2_norm(x)))
        np.testing.assert_allclose(x.grad, [[0, 0], [0.6, 0.8]])


class TestGradCheck:
    def test_square(self):
        res = ad.grad_check(lambda x: ad.sum(x * x), t64([2.0]), h=1e-4)
        assert res.passed and res.max_rel_error <= 1e-6

    def test_layer_norm_sum(self, rng):
        g, b = t64(np.ones(4)), t64(np.zeros(4))
        res = ad.grad_check(lambda x: ad.sum(ad.layer_norm(x, g, b)), t64(rng.normal(size=(3, 4))), tol=1e-3)
        assert res.passed

    def test_train_dropout_rejected(self, rng):
        with pytest.raises(UsageError):
            ad.grad_check(lambda x: ad.sum(ad.dropout(x, 0.5, True, rng)), t64(np.ones(8)))

    def test_detects_wrong_gradient(self):
        def bad(x):
            # claims d(x^2)/dx = 1
            sq = ad.Tensor._result(x.data * x.data, (x,), lambda g: (g,), "bad_square")
            return ad.sum(sq)

        res = ad.grad_check(bad, t64([1.0, 2.0]))
        assert not res.passed and res.worst is not None

    def test_restores_state(self, rng):
        x = ad.Tensor(rng.normal(size=3))
        before = x.data.copy()
        ad.grad_check(lambda x: ad.sum(x * x), x)
        assert x.data.dtype == np.float32 and not x.requires_grad and x.grad is None
        np.testing.assert_array_equal(x.data, before)

    def test_shadow_mode_upcasts(self):
        seen = []

        def f(x):
            seen.append(x.data.dtype)
            return ad.sum(x * x)

        ad.grad_check(f, ad.Tensor([1.0, 2.0]))
        assert set(seen) == {np.dtype(np.float64)}
