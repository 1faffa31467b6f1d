"""Forward-pass oracles and shape/validation behavior of tensor ops."""

import numpy as np
import numpy.testing as npt
import pytest

import agnet.tensor as T
from agnet.errors import ShapeError
from agnet.tensor import Tensor


class TestElementwise:
    def test_arithmetic_matches_numpy(self, rng):
        a = rng.standard_normal((3, 4)).astype(np.float32)
        b = rng.standard_normal((3, 4)).astype(np.float32)
        ta, tb = Tensor(a), Tensor(b)
        npt.assert_array_equal((ta + tb).data, a + b)
        npt.assert_array_equal((ta - tb).data, a - b)
        npt.assert_array_equal((ta * tb).data, a * b)
        npt.assert_allclose((ta / tb).data, a / b, rtol=1e-6)
        npt.assert_array_equal((-ta).data, -a)
        npt.assert_array_equal((ta + 2.0).data, a + 2.0)
        npt.assert_array_equal((3.0 * ta).data, 3.0 * a)

    def test_broadcasting(self, rng):
        a = rng.standard_normal((3, 1, 5)).astype(np.float32)
        b = rng.standard_normal((1, 4, 5)).astype(np.float32)
        npt.assert_array_equal(T.mul(Tensor(a), Tensor(b)).data, a * b)

    def test_relu_sigmoid_log(self, rng):
        x = rng.standard_normal((4, 7)).astype(np.float32)
        npt.assert_array_equal(T.relu(Tensor(x)).data, np.maximum(x, 0))
        npt.assert_allclose(T.sigmoid(Tensor(x)).data, 1 / (1 + np.exp(-x)), rtol=1e-6)
        pos = np.abs(x) + 0.1
        npt.assert_allclose(T.log(Tensor(pos)).data, np.log(pos), rtol=1e-6)

    def test_sigmoid_is_stable_at_extremes(self):
        x = Tensor(np.array([-500.0, 0.0, 500.0]))
        y = T.sigmoid(x).data
        assert np.isfinite(y).all()
        npt.assert_allclose(y, [0.0, 0.5, 1.0], atol=1e-12)


class TestReductionsAndShape:
    def test_sum_mean_axes(self, rng):
        x = rng.standard_normal((2, 3, 4)).astype(np.float32)
        t = Tensor(x)
        npt.assert_allclose(T.tensor_sum(t).data, x.sum(), rtol=1e-6)
        npt.assert_allclose(T.tensor_sum(t, axis=1).data, x.sum(axis=1), rtol=1e-6)
        npt.assert_allclose(
            T.tensor_sum(t, axis=(1, 2), keepdims=True).data,
            x.sum(axis=(1, 2), keepdims=True),
            rtol=1e-6,
        )
        npt.assert_allclose(T.tensor_mean(t, axis=0).data, x.mean(axis=0), rtol=1e-6)

    def test_reshape_concat(self, rng):
        x = rng.standard_normal((2, 6)).astype(np.float32)
        y = rng.standard_normal((2, 3)).astype(np.float32)
        npt.assert_array_equal(T.reshape(Tensor(x), (3, 4)).data, x.reshape(3, 4))
        npt.assert_array_equal(
            T.concat([Tensor(x), Tensor(y)], axis=1).data, np.concatenate([x, y], axis=1)
        )


class TestSoftmax:
    def test_rows_sum_to_one(self, rng):
        x = rng.standard_normal((5, 9)).astype(np.float32) * 10
        p = T.softmax(Tensor(x)).data
        npt.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-6)
        assert (p > 0).all()

    def test_shift_invariance(self, rng):
        x = rng.standard_normal((3, 4))
        p1 = T.softmax(Tensor(x, dtype=np.float64)).data
        p2 = T.softmax(Tensor(x + 100.0, dtype=np.float64)).data
        npt.assert_allclose(p1, p2, atol=1e-12)

    def test_huge_logits_do_not_overflow(self):
        p = T.softmax(Tensor(np.array([[1000.0, 0.0, -1000.0]]))).data
        assert np.isfinite(p).all()
        npt.assert_allclose(p[0, 0], 1.0, atol=1e-6)


class TestLinear:
    def test_matches_matmul(self, rng):
        x = rng.standard_normal((4, 6)).astype(np.float32)
        w = rng.standard_normal((3, 6)).astype(np.float32)
        b = rng.standard_normal(3).astype(np.float32)
        npt.assert_allclose(
            T.linear(Tensor(x), Tensor(w), Tensor(b)).data, x @ w.T + b, rtol=1e-5
        )

    def test_shape_errors(self):
        with pytest.raises(ShapeError):
            T.linear(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))
        with pytest.raises(ShapeError):
            T.linear(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 3))), Tensor(np.zeros(5)))


class TestConvPoolWrappers:
    def test_conv2d_channel_mismatch(self):
        with pytest.raises(ShapeError):
            T.conv2d(Tensor(np.zeros((1, 3, 8, 8))), Tensor(np.zeros((2, 4, 3, 3))))

    def test_conv2d_even_kernel_rejected(self):
        with pytest.raises(ShapeError):
            T.conv2d(Tensor(np.zeros((1, 1, 8, 8))), Tensor(np.zeros((1, 1, 2, 2))))

    def test_conv2d_bias(self, rng):
        x = rng.standard_normal((2, 3, 5, 5)).astype(np.float32)
        w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
        b = rng.standard_normal(4).astype(np.float32)
        y0 = T.conv2d(Tensor(x), Tensor(w), padding=1).data
        y1 = T.conv2d(Tensor(x), Tensor(w), Tensor(b), padding=1).data
        npt.assert_allclose(y1, y0 + b[None, :, None, None], rtol=1e-5)

    def test_global_avg_pool(self, rng):
        x = rng.standard_normal((2, 3, 4, 5)).astype(np.float32)
        npt.assert_allclose(T.global_avg_pool(Tensor(x)).data, x.mean(axis=(2, 3)), rtol=1e-6)


class TestBilinearUpsample:
    def test_identity_when_same_size(self, rng):
        x = rng.standard_normal((1, 2, 5, 7)).astype(np.float32)
        npt.assert_array_equal(T.bilinear_upsample2d(Tensor(x), 5, 7).data, x)

    def test_constant_map_stays_constant(self):
        x = Tensor(np.full((1, 1, 4, 5), 3.25, dtype=np.float32))
        y = T.bilinear_upsample2d(x, 16, 20).data
        npt.assert_allclose(y, 3.25, atol=1e-6)

    def test_integer_factor_against_manual_interpolation(self):
        # 2x upsample of a 2x2 ramp, align-corners=false reference values
        x = Tensor(np.array([[[[0.0, 1.0], [2.0, 3.0]]]]))
        y = T.bilinear_upsample2d(x, 4, 4).data[0, 0]
        expect = np.array(
            [
                [0.0, 0.25, 0.75, 1.0],
                [0.5, 0.75, 1.25, 1.5],
                [1.5, 1.75, 2.25, 2.5],
                [2.0, 2.25, 2.75, 3.0],
            ]
        )
        npt.assert_allclose(y, expect, atol=1e-6)

    def test_downsample_rejected(self):
        with pytest.raises(ShapeError):
            T.bilinear_upsample2d(Tensor(np.zeros((1, 1, 8, 8))), 4, 4)


class TestBatchNorm:
    def test_train_normalizes_batch(self, rng):
        x = rng.standard_normal((8, 3, 6, 5)).astype(np.float32) * 3 + 1
        st = T.BatchNormState(3)
        y = T.batch_norm2d(
            Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), st, training=True
        ).data
        npt.assert_allclose(y.mean(axis=(0, 2, 3)), 0.0, atol=1e-5)
        npt.assert_allclose(y.var(axis=(0, 2, 3)), 1.0, atol=1e-3)

    def test_running_stats_update(self, rng):
        x = rng.standard_normal((8, 2, 4, 4)).astype(np.float32)
        st = T.BatchNormState(2)
        T.batch_norm2d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), st, training=True)
        mu = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        npt.assert_allclose(st.mean, 0.1 * mu, atol=1e-6)
        npt.assert_allclose(st.var, 0.9 * 1.0 + 0.1 * var, atol=1e-6)

    def test_eval_uses_running_stats(self, rng):
        x = rng.standard_normal((4, 2, 3, 3)).astype(np.float32)
        st = T.BatchNormState(2)
        st.mean = np.array([1.0, -1.0], dtype=np.float32)
        st.var = np.array([4.0, 0.25], dtype=np.float32)
        y = T.batch_norm2d(
            Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), st, training=False
        ).data
        expect = (x - st.mean[None, :, None, None]) / np.sqrt(st.var + st.eps)[None, :, None, None]
        npt.assert_allclose(y, expect, rtol=1e-5)

    def test_eval_does_not_touch_stats(self, rng):
        x = rng.standard_normal((4, 2, 3, 3)).astype(np.float32)
        st = T.BatchNormState(2)
        before = (st.mean.copy(), st.var.copy())
        T.batch_norm2d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), st, training=False)
        npt.assert_array_equal(st.mean, before[0])
        npt.assert_array_equal(st.var, before[1])


class TestWeightedCrossEntropy:
    def test_matches_manual_nll(self, rng):
        logits = rng.standard_normal((6, 4)).astype(np.float64)
        labels = rng.integers(0, 4, 6)
        w = rng.uniform(0.5, 2.0, 4)
        loss = T.weighted_cross_entropy(Tensor(logits, dtype=np.float64), labels, w).item()
        p = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
        nll = -np.log(p[np.arange(6), labels])
        expect = (w[labels] * nll).sum() / w[labels].sum()
        npt.assert_allclose(loss, expect, rtol=1e-10)

    def test_uniform_weights_default(self, rng):
        logits = rng.standard_normal((5, 3)).astype(np.float64)
        labels = rng.integers(0, 3, 5)
        l1 = T.weighted_cross_entropy(Tensor(logits, dtype=np.float64), labels).item()
        l2 = T.weighted_cross_entropy(Tensor(logits, dtype=np.float64), labels, np.ones(3)).item()
        npt.assert_allclose(l1, l2, rtol=1e-12)

    def test_label_validation(self):
        logits = Tensor(np.zeros((2, 3)))
        with pytest.raises(ValueError):
            T.weighted_cross_entropy(logits, np.array([0, 3]))
        with pytest.raises(ValueError):
            T.weighted_cross_entropy(logits, np.array([-1, 0]))
        with pytest.raises(ShapeError):
            T.weighted_cross_entropy(logits, np.array([0, 1, 2]))


def test_default_dtype_switch():
    t0 = Tensor(np.zeros(3))
    assert t0.dtype == np.float32
    with T.using_dtype(np.float64):
        assert Tensor(np.zeros(3)).dtype == np.float64
    assert Tensor(np.zeros(3)).dtype == np.float32
    with pytest.raises(ValueError):
        T.set_default_dtype(np.int32)
