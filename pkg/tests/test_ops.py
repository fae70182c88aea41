"""Forward semantics and shape contracts of the differentiable primitives."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from coseg import ops
from coseg.tensor import Tensor, Graph, backward, no_grad


def T(a, grad=False, dtype=np.float64):
    return Tensor(np.asarray(a, dtype=dtype), grad)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


class TestConv2d:
    def test_all_ones_sums_to_nine(self):
        out = ops.conv2d(T(np.ones((1, 1, 3, 3))), T(np.ones((1, 1, 3, 3))), T([0.0]))
        assert out.shape == (1, 1, 1, 1)
        assert out.item() == 9.0

    def test_hand_evaluated_window(self):
        x = T(np.arange(1, 10).reshape(1, 1, 3, 3))
        w = T(np.array([[1, 0], [0, 1]]).reshape(1, 1, 2, 2))
        out = ops.conv2d(x, w, T([0.0]))
        np.testing.assert_array_equal(out.data[0, 0], [[6, 8], [12, 14]])

    @pytest.mark.parametrize("k", [1, 2, 3, 5])
    def test_full_padding_extent(self, rng, k):
        x = T(rng.normal(size=(2, 3, 7, 7)))
        w = T(rng.normal(size=(4, 3, k, k)))
        out = ops.conv2d(x, w, T(np.zeros(4)), stride=1, pad=k - 1)
        assert out.shape == (2, 4, 7 + k - 1, 7 + k - 1)

    def test_is_cross_correlation_against_loop(self, rng):
        x = rng.normal(size=(2, 3, 6, 5))
        w = rng.normal(size=(4, 3, 3, 3))
        b = rng.normal(size=4)
        out = ops.conv2d(T(x), T(w), T(b), stride=2, pad=1).data
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        ref = np.zeros_like(out)
        for n in range(2):
            for o in range(4):
                for i in range(out.shape[2]):
                    for j in range(out.shape[3]):
                        ref[n, o, i, j] = (xp[n, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3] * w[o]).sum() + b[o]
        np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)

    def test_channel_mismatch_names_both_shapes(self):
        with pytest.raises(ValueError, match=r"\(1, 2, 4, 4\).*\(1, 3, 3, 3\)|\(1, 3, 3, 3\).*\(1, 2, 4, 4\)"):
            ops.conv2d(T(np.zeros((1, 2, 4, 4))), T(np.zeros((1, 3, 3, 3))), T([0.0]))


class TestActivation:
    def test_sigmoid_zero(self):
        assert ops.sigmoid(T([0.0])).data[0] == 0.5

    def test_relu_values(self):
        np.testing.assert_array_equal(ops.relu(T([-3.2, 3.2])).data, [0.0, 3.2])

    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=20))
    def test_sigmoid_symmetry(self, xs):
        x = np.array(xs)
        s = ops.sigmoid(T(x)).data + ops.sigmoid(T(-x)).data
        np.testing.assert_allclose(s, 1.0, atol=1e-15)

    def test_sigmoid_extremes_are_finite(self):
        y = ops.sigmoid(T([-1000.0, 1000.0])).data
        assert np.all(np.isfinite(y))
        assert y[0] == 0.0 and y[1] == 1.0

    def test_activation_dispatch(self):
        x = T([-1.0, 2.0])
        np.testing.assert_array_equal(ops.activation(x, "relu").data, ops.relu(x).data)
        with pytest.raises(ValueError):
            ops.activation(x, "tanh")


class TestBatchNorm:
    def test_constant_channel_train_is_zero(self):
        x = T(np.full((2, 1, 3, 3), 4.5))
        st_ = ops.BatchNormStats.fresh(1)
        out = ops.batchnorm2d(x, T([1.0]), T([0.0]), st_, training=True)
        np.testing.assert_array_equal(out.data, 0.0)

    def test_train_normalises(self, rng):
        x = T(rng.normal(3.0, 2.0, size=(4, 3, 5, 5)))
        out = ops.batchnorm2d(x, T(np.ones(3)), T(np.zeros(3)), ops.BatchNormStats.fresh(3), True).data
        assert np.abs(out.mean(axis=(0, 2, 3))).max() < 1e-6
        assert np.abs(out.var(axis=(0, 2, 3)) - 1).max() < 1e-3

    def test_eval_identity(self, rng):
        x = rng.normal(size=(2, 3, 4, 4))
        out = ops.batchnorm2d(T(x), T(np.ones(3)), T(np.zeros(3)), ops.BatchNormStats.fresh(3), False).data
        np.testing.assert_allclose(out, x, rtol=1e-5)

    def test_running_stats_update(self, rng):
        x = rng.normal(2.0, 3.0, size=(4, 2, 6, 6))
        stats = ops.BatchNormStats.fresh(2)
        ops.batchnorm2d(T(x), T(np.ones(2)), T(np.zeros(2)), stats, True)
        m = x.mean(axis=(0, 2, 3))
        v = x.var(axis=(0, 2, 3), ddof=1)
        np.testing.assert_allclose(stats.mean, 0.1 * m, rtol=1e-12)
        np.testing.assert_allclose(stats.var, 0.9 + 0.1 * v, rtol=1e-12)

    def test_eval_leaves_stats_alone(self, rng):
        stats = ops.BatchNormStats.fresh(2)
        ops.batchnorm2d(T(rng.normal(size=(2, 2, 3, 3))), T(np.ones(2)), T(np.zeros(2)), stats, False)
        np.testing.assert_array_equal(stats.mean, 0.0)
        np.testing.assert_array_equal(stats.var, 1.0)


class TestDropout:
    def test_p_zero_identity(self, rng):
        x = rng.normal(size=(3, 4))
        np.testing.assert_array_equal(ops.dropout(T(x), 0.0, True, rng).data, x)

    @pytest.mark.parametrize("p", [0.0, 0.3, 0.9])
    def test_eval_identity(self, rng, p):
        x = rng.normal(size=(3, 4))
        np.testing.assert_array_equal(ops.dropout(T(x), p, False, rng).data, x)

    def test_survival_rate_and_mean(self, rng):
        x = rng.uniform(1.0, 2.0, size=100_000)
        y = ops.dropout(T(x), 0.5, True, rng).data
        frac = np.count_nonzero(y) / y.size
        assert 0.49 <= frac <= 0.51
        assert abs(y.mean() - x.mean()) / x.mean() < 0.02

    def test_bad_probability(self, rng):
        with pytest.raises(ValueError):
            ops.dropout(T([1.0]), 1.0, True, rng)


class TestResampling:
    def test_upsample_example(self):
        out = ops.upsample_nearest2x(T(np.array([[1, 2], [3, 4]]).reshape(1, 1, 2, 2))).data[0, 0]
        np.testing.assert_array_equal(out, [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]])

    def test_upsample_constant_and_sum(self, rng):
        c = ops.upsample_nearest2x(T(np.full((1, 2, 3, 3), 5.0))).data
        assert c.shape == (1, 2, 6, 6) and np.all(c == 5.0)
        x = rng.normal(size=(2, 3, 4, 5))
        assert np.isclose(ops.upsample_nearest2x(T(x)).data.sum(), 4 * x.sum())

    def test_pools(self):
        x = T(np.arange(16.0).reshape(1, 1, 4, 4))
        np.testing.assert_array_equal(ops.avgpool2x2(x).data[0, 0], [[2.5, 4.5], [10.5, 12.5]])
        np.testing.assert_array_equal(ops.maxpool2x2(x).data[0, 0], [[5, 7], [13, 15]])

    def test_odd_extent_rejected(self):
        with pytest.raises(ValueError):
            ops.avgpool2x2(T(np.zeros((1, 1, 3, 4))))


class TestReductions:
    def test_channelvec_constant(self):
        assert ops.pool_spatial_to_channelvec(T(np.full((1, 1, 3, 3), 7.0))).data[0, 0] == 7.0

    def test_channelvec_mean(self):
        out = ops.pool_spatial_to_channelvec(T(np.array([[1, 3], [5, 7]]).reshape(1, 1, 2, 2)))
        assert out.data[0, 0] == 4.0

    def test_shapes(self):
        x = T(np.zeros((2, 64, 8, 8)))
        assert ops.pool_spatial_to_channelvec(x).shape == (2, 64)
        assert ops.pool_channels_to_spatialmap(x).shape == (2, 8, 8)

    def test_spatialmap_mean(self):
        x = np.stack([np.full((3, 3), 2.0), np.full((3, 3), 4.0)])[None]
        np.testing.assert_array_equal(ops.pool_channels_to_spatialmap(T(x)).data, 3.0)

    def test_spatialmap_single_channel(self, rng):
        x = rng.normal(size=(2, 1, 4, 4))
        np.testing.assert_array_equal(ops.pool_channels_to_spatialmap(T(x)).data, x[:, 0])


class TestFullyConnected:
    def test_identity(self, rng):
        x = rng.normal(size=(3, 4))
        np.testing.assert_array_equal(ops.fully_connected(T(x), T(np.eye(4)), T(np.zeros(4))).data, x)

    def test_arithmetic(self):
        out = ops.fully_connected(T([[1.0, 2.0]]), T(np.eye(2)), T([10.0, 20.0]))
        np.testing.assert_array_equal(out.data, [[11, 22]])

    def test_zero_input(self, rng):
        b = rng.normal(size=3)
        out = ops.fully_connected(T(np.zeros((2, 4))), T(rng.normal(size=(4, 3))), T(b))
        np.testing.assert_array_equal(out.data, np.tile(b, (2, 1)))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match=r"\(2, 4\)"):
            ops.fully_connected(T(np.zeros((2, 4))), T(np.zeros((3, 3))), T(np.zeros(3)))


class TestBroadcastMul:
    def test_ones_identity(self, rng):
        f = rng.normal(size=(2, 3, 4, 4))
        np.testing.assert_array_equal(ops.broadcast_mul(T(np.ones((2, 3))), T(f)).data, f)

    def test_selector(self, rng):
        f = rng.normal(size=(1, 2, 3, 3))
        out = ops.broadcast_mul(T([[0.0, 1.0]]), T(f)).data
        np.testing.assert_array_equal(out[0, 0], 0.0)
        np.testing.assert_array_equal(out[0, 1], f[0, 1])

    def test_spatial_half(self, rng):
        f = rng.normal(size=(2, 3, 4, 4))
        np.testing.assert_array_equal(ops.broadcast_mul(T(np.full((2, 4, 4), 0.5)), T(f)).data, f / 2)

    def test_incompatible(self):
        with pytest.raises(ValueError):
            ops.broadcast_mul(T(np.zeros((2, 5))), T(np.zeros((2, 3, 4, 4))))

    def test_gradient_reduces_to_operand_shape(self, rng):
        a = T(rng.normal(size=(2, 3)), True)
        f = T(rng.normal(size=(2, 3, 4, 4)), True)
        backward(ops.sum_all(ops.broadcast_mul(a, f)))
        assert a.grad.shape == (2, 3) and f.grad.shape == (2, 3, 4, 4)
        np.testing.assert_allclose(a.grad, f.data.sum(axis=(2, 3)))
        np.testing.assert_allclose(f.grad, np.broadcast_to(a.data[:, :, None, None], f.shape))


class TestSoftmaxCrossEntropy:
    def test_uniform(self, rng):
        z = np.repeat(rng.normal(size=(2, 1, 3, 3)), 2, axis=1)
        loss = ops.softmax_cross_entropy(T(z), rng.integers(0, 2, (2, 3, 3)))
        assert abs(loss.item() - np.log(2)) < 1e-12

    def test_saturation(self):
        z = np.zeros((1, 2, 2, 2))
        z[:, 1] = 20.0
        assert ops.softmax_cross_entropy(T(z), np.ones((1, 2, 2), int)).item() < 1e-8

    def test_single_pixel(self):
        z = np.array([1.0, 0.0]).reshape(1, 2, 1, 1)
        loss = ops.softmax_cross_entropy(T(z), np.zeros((1, 1, 1), int)).item()
        assert abs(loss - (-np.log(np.e / (np.e + 1)))) < 1e-12
        assert abs(loss - 0.313262) < 1e-6

    def test_bad_target(self):
        with pytest.raises(ValueError):
            ops.softmax_cross_entropy(T(np.zeros((1, 2, 2, 2))), np.full((1, 2, 2), 2))
        with pytest.raises(ValueError):
            ops.softmax_cross_entropy(T(np.zeros((1, 2, 2, 2))), np.zeros((1, 3, 3), int))


class TestBackward:
    def test_sum_gradient_is_ones(self, rng):
        x = T(rng.normal(size=(3, 4)), True)
        backward(ops.sum_all(x))
        np.testing.assert_array_equal(x.grad, 1.0)

    def test_square_gradient(self, rng):
        x = T(rng.normal(size=(2, 3, 2, 2)), True)
        backward(ops.sum_all(ops.broadcast_mul(x, x)))
        np.testing.assert_allclose(x.grad, 2 * x.data, rtol=1e-15)

    def test_nonscalar_loss_rejected(self, rng):
        x = T(rng.normal(size=3), True)
        with pytest.raises(ValueError):
            backward(ops.relu(x))

    def test_gradients_accumulate(self, rng):
        x = T(rng.normal(size=4), True)
        backward(ops.sum_all(x))
        backward(ops.sum_all(x))
        np.testing.assert_array_equal(x.grad, 2.0)

    def test_shared_input_accumulates(self, rng):
        x = T(rng.normal(size=(2, 3)), True)
        backward(ops.sum_all(ops.add(x, x)))
        np.testing.assert_array_equal(x.grad, 2.0)

    def test_no_grad_records_nothing(self, rng):
        x = T(rng.normal(size=3), True)
        with no_grad():
            y = ops.relu(x)
        assert y.is_leaf and not y.requires_grad

    def test_replay_is_bit_exact(self, rng):
        x = T(rng.normal(size=(1, 2, 4, 4)), True)
        w = T(rng.normal(size=(3, 2, 3, 3)), True)
        y = ops.sum_all(ops.sigmoid(ops.conv2d(x, w, T(np.zeros(3)), 1, 1)))
        g = Graph.trace(y)
        assert y in g
        assert g.replay()

    def test_leaves(self, rng):
        x = T(rng.normal(size=3), True)
        c = T(rng.normal(size=3))
        g = Graph.trace(ops.sum_all(ops.add(x, c)))
        assert any(leaf is x for leaf in g.leaves())
