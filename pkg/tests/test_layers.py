import numpy as np
import pytest

from echograph.errors import DimensionError, NonFiniteError, TrainingDivergedError
from echograph.layers import (
    Adam,
    Conv2d,
    Dense,
    Elu,
    GlobalAvgPool,
    LayerNorm,
    MaxPool2x2,
    Parameter,
    Relu,
    SpiralConv,
    finite_diff_check,
    parameter_count,
)
from gradtools import layer_gradcheck


class TestDense:
    def test_identity_weights(self):
        rng = np.random.default_rng(0)
        layer = Dense(4, 4, rng)
        layer.weight.value = np.eye(4)
        layer.bias.value = np.zeros(4)
        x = rng.normal(size=(3, 4))
        np.testing.assert_array_equal(layer.forward(x), x)

    def test_zero_input_gives_bias(self):
        rng = np.random.default_rng(1)
        layer = Dense(5, 3, rng)
        layer.bias.value = np.array([1.0, -2.0, 0.5])
        np.testing.assert_array_equal(layer.forward(np.zeros((2, 5))), np.tile(layer.bias.value, (2, 1)))

    def test_gradients(self):
        rng = np.random.default_rng(2)
        layer = Dense(5, 3, rng)
        x = rng.normal(size=(4, 5))
        assert layer_gradcheck(layer, x) < 1e-6

    def test_gradients_with_extra_batch_axes(self):
        rng = np.random.default_rng(3)
        layer = Dense(4, 2, rng)
        x = rng.normal(size=(2, 3, 4))
        assert layer_gradcheck(layer, x) < 1e-6

    def test_width_mismatch_rejected(self):
        layer = Dense(5, 3, np.random.default_rng(0))
        with pytest.raises(DimensionError):
            layer.forward(np.zeros((2, 4)))

    def test_nonfinite_rejected(self):
        layer = Dense(3, 2, np.random.default_rng(0))
        x = np.array([[1.0, np.nan, 0.0]])
        with pytest.raises(NonFiniteError):
            layer.forward(x)

    def test_forward_is_pure(self):
        rng = np.random.default_rng(4)
        layer = Dense(6, 6, rng)
        x = rng.normal(size=(2, 6))
        a = layer.forward(x)
        b = layer.forward(x)
        np.testing.assert_array_equal(a, b)


class TestActivations:
    def test_elu_values(self):
        elu = Elu()
        y = elu.forward(np.array([0.0, 1.0, -20.0]))
        assert y[0] == 0.0
        assert y[1] == 1.0
        assert abs(y[2] - (-1.0)) < 1e-8

    def test_elu_gradients(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(3, 7))
        assert layer_gradcheck(Elu(), x) < 1e-6

    def test_relu_values(self):
        y = Relu().forward(np.array([-2.0, 0.0, 3.0]))
        np.testing.assert_array_equal(y, [0.0, 0.0, 3.0])

    def test_relu_gradients_away_from_kink(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=(3, 7))
        x = np.where(np.abs(x) < 0.1, x + 0.2, x)  # keep probes off the kink
        assert layer_gradcheck(Relu(), x) < 1e-6


class TestLayerNorm:
    def test_constant_input_maps_to_shift(self):
        ln = LayerNorm(6)
        ln.shift.value = np.full(6, 0.25)
        y = ln.forward(np.full((2, 6), 3.0))
        np.testing.assert_allclose(y, 0.25, atol=1e-6)

    def test_normalized_core_statistics(self):
        rng = np.random.default_rng(7)
        ln = LayerNorm(64)
        x = rng.normal(scale=5.0, size=(10, 64))  # large variance so eps is negligible
        y = ln.forward(x)
        np.testing.assert_allclose(y.mean(axis=-1), 0.0, atol=1e-6)
        np.testing.assert_allclose(y.var(axis=-1), 1.0, atol=1e-6)

    def test_gradients(self):
        rng = np.random.default_rng(8)
        ln = LayerNorm(5)
        x = rng.normal(size=(4, 5))
        assert layer_gradcheck(ln, x) < 1e-5

    def test_width_one_rejected(self):
        with pytest.raises(DimensionError):
            LayerNorm(1)


class TestConv2d:
    def test_one_by_one_identity(self):
        conv = Conv2d(1, 1, 1, np.random.default_rng(0))
        conv.weight.value = np.ones((1, 1, 1, 1))
        conv.bias.value = np.zeros(1)
        x = np.random.default_rng(1).normal(size=(2, 5, 5, 1))
        np.testing.assert_allclose(conv.forward(x), x)

    def test_box_kernel_on_constant_image(self):
        conv = Conv2d(1, 1, 3, np.random.default_rng(0), padding=1)
        conv.weight.value = np.ones((3, 3, 1, 1))
        conv.bias.value = np.zeros(1)
        c = 0.7
        y = conv.forward(np.full((1, 6, 6, 1), c))
        assert y.shape == (1, 6, 6, 1)
        np.testing.assert_allclose(y[0, 1:-1, 1:-1, 0], 9 * c)
        np.testing.assert_allclose(y[0, 0, 0, 0], 4 * c)

    def test_strided_output_shape(self):
        conv = Conv2d(2, 4, 3, np.random.default_rng(2), stride=2, padding=1)
        y = conv.forward(np.zeros((1, 8, 8, 2)))
        assert y.shape == (1, 4, 4, 4)

    def test_gradients(self):
        rng = np.random.default_rng(9)
        conv = Conv2d(2, 3, 3, rng, padding=1)
        x = rng.normal(size=(1, 6, 6, 2))
        assert layer_gradcheck(conv, x) < 1e-5

    def test_gradients_with_stride(self):
        rng = np.random.default_rng(10)
        conv = Conv2d(2, 2, 3, rng, stride=2, padding=1)
        x = rng.normal(size=(2, 6, 6, 2))
        assert layer_gradcheck(conv, x) < 1e-5

    def test_kernel_too_big_rejected(self):
        conv = Conv2d(1, 1, 7, np.random.default_rng(0))
        with pytest.raises(DimensionError):
            conv.forward(np.zeros((1, 4, 4, 1)))

    def test_channel_mismatch_rejected(self):
        conv = Conv2d(3, 1, 3, np.random.default_rng(0))
        with pytest.raises(DimensionError):
            conv.forward(np.zeros((1, 6, 6, 2)))


class TestPooling:
    def test_maxpool_values(self):
        x = np.arange(16, dtype=np.float64).reshape(1, 4, 4, 1)
        y = MaxPool2x2().forward(x)
        np.testing.assert_array_equal(y[0, :, :, 0], [[5, 7], [13, 15]])

    def test_maxpool_tie_routes_to_single_winner(self):
        pool = MaxPool2x2()
        x = np.ones((1, 2, 2, 1))
        pool.forward(x, train=True)
        gx = pool.backward(np.array([[[[2.5]]]]))
        assert gx.shape == x.shape
        assert np.count_nonzero(gx) == 1
        assert gx.sum() == 2.5

    def test_maxpool_gradients(self):
        rng = np.random.default_rng(11)
        x = rng.normal(size=(2, 4, 4, 3))
        assert layer_gradcheck(MaxPool2x2(), x) < 1e-5

    def test_odd_size_rejected(self):
        with pytest.raises(DimensionError):
            MaxPool2x2().forward(np.zeros((1, 5, 4, 1)))

    def test_global_avg_pool(self):
        x = np.random.default_rng(12).normal(size=(2, 4, 6, 3))
        y = GlobalAvgPool().forward(x)
        np.testing.assert_allclose(y, x.mean(axis=(1, 2)))

    def test_global_avg_pool_gradients(self):
        rng = np.random.default_rng(13)
        x = rng.normal(size=(2, 4, 4, 2))
        assert layer_gradcheck(GlobalAvgPool(), x) < 1e-6


class TestSpiralConv:
    def make(self, rng, in_dim=4, out_dim=3, length=3):
        return SpiralConv(in_dim, out_dim, length, rng)

    def ring_matrix(self, n, length):
        return np.stack([(np.arange(length) + i) % n for i in range(n)])

    def test_length_one_is_pointwise_mlp(self):
        rng = np.random.default_rng(14)
        layer = SpiralConv(4, 3, 1, rng)
        x = rng.normal(size=(6, 4))
        spirals = np.arange(6)[:, None]
        got = layer.forward(x, spirals)
        manual = layer.fc2.forward(Elu().forward(layer.fc1.forward(x)))
        np.testing.assert_array_equal(got, manual)

    def test_node_relabeling_equivariance(self):
        rng = np.random.default_rng(15)
        layer = self.make(rng)
        n = 6
        x = rng.normal(size=(n, 4))
        spirals = self.ring_matrix(n, 3)
        base = layer.forward(x, spirals)
        perm = rng.permutation(n)
        inv = np.argsort(perm)
        # renumber storage: node i now stored at row inv[i]
        got = layer.forward(x[perm], inv[spirals][perm])
        np.testing.assert_array_equal(got, base[perm])

    def test_output_depends_only_on_spiral_nodes(self):
        rng = np.random.default_rng(16)
        layer = self.make(rng)
        n = 8
        x = rng.normal(size=(n, 4))
        spirals = self.ring_matrix(n, 3)
        base = layer.forward(x, spirals)
        bumped = x.copy()
        bumped[5] += 10.0  # node 5 is outside the spiral of node 0 ([0,1,2])
        got = layer.forward(bumped, spirals)
        np.testing.assert_array_equal(got[0], base[0])
        assert not np.array_equal(got[5], base[5])

    def test_gradients(self):
        rng = np.random.default_rng(17)
        layer = self.make(rng)
        x = rng.normal(size=(6, 4))
        assert layer_gradcheck(layer, x, extra=(self.ring_matrix(6, 3),)) < 1e-5

    def test_gradients_batched(self):
        rng = np.random.default_rng(18)
        layer = self.make(rng)
        x = rng.normal(size=(2, 6, 4))
        assert layer_gradcheck(layer, x, extra=(self.ring_matrix(6, 3),)) < 1e-5

    def test_batched_matches_stacked(self):
        rng = np.random.default_rng(19)
        layer = self.make(rng)
        x = rng.normal(size=(3, 6, 4))
        spirals = self.ring_matrix(6, 3)
        batched = layer.forward(x, spirals)
        singles = np.stack([layer.forward(x[b], spirals) for b in range(3)])
        np.testing.assert_array_equal(batched, singles)

    def test_bad_indices_rejected(self):
        rng = np.random.default_rng(20)
        layer = self.make(rng)
        x = rng.normal(size=(4, 4))
        with pytest.raises(DimensionError):
            layer.forward(x, np.array([[0, 1, 9]]))

    def test_wrong_spiral_width_rejected(self):
        rng = np.random.default_rng(21)
        layer = self.make(rng, length=3)
        x = rng.normal(size=(4, 4))
        with pytest.raises(DimensionError):
            layer.forward(x, self.ring_matrix(4, 2))


class TestAdam:
    def test_zero_gradient_keeps_parameters(self):
        p = Parameter("w", np.array([1.0, -2.0]))
        opt = Adam([p], lr=0.1)
        opt.step()
        np.testing.assert_array_equal(p.value, [1.0, -2.0])

    def test_first_step_magnitude(self):
        p = Parameter("w", np.array([0.0]))
        opt = Adam([p], lr=0.1)
        p.grad[...] = 1.0
        opt.step()
        assert p.value[0] == pytest.approx(-0.1, abs=1e-8)
        assert opt.step_count == 1

    def test_deterministic_across_runs(self):
        def run():
            rng = np.random.default_rng(42)
            p = Parameter("w", np.linspace(-1, 1, 8))
            opt = Adam([p], lr=0.01)
            for _ in range(100):
                p.grad[...] = rng.normal(size=8)
                opt.step()
            return p.value

        np.testing.assert_array_equal(run(), run())

    def test_nonfinite_gradient_fails_fast(self):
        p = Parameter("w", np.zeros(3))
        opt = Adam([p])
        p.grad[...] = np.array([0.0, np.inf, 0.0])
        with pytest.raises(TrainingDivergedError):
            opt.step()

    def test_step_counter_resume(self):
        p = Parameter("w", np.zeros(1))
        opt = Adam([p], initial_step=500)
        p.grad[...] = 1.0
        opt.step()
        assert opt.step_count == 501


class TestFiniteDiffCheck:
    def test_linear_function_near_machine_eps(self):
        w = np.random.default_rng(22).normal(size=5)
        x = np.random.default_rng(23).normal(size=5)

        def loss():
            return float(w @ x)

        def grads():
            return [w.copy()]

        assert finite_diff_check(loss, grads, [x]) < 1e-9

    def test_detects_corrupted_backward(self):
        rng = np.random.default_rng(24)
        layer = Dense(5, 3, rng)
        x = rng.normal(size=(2, 5))
        u = rng.normal(size=(2, 3))

        def loss():
            return float((u * layer.forward(x)).sum())

        def grads():
            for p in layer.params():
                p.grad[...] = 0
            layer.forward(x, train=True)
            gin = layer.backward(u)
            bad = layer.weight.grad.copy()
            bad[0, 0] *= 1.10
            return [gin, bad, layer.bias.grad]

        err = finite_diff_check(loss, grads, [x, layer.weight.value, layer.bias.value])
        assert err > 1e-2

    def test_shape_mismatch_rejected(self):
        with pytest.raises(DimensionError):
            finite_diff_check(lambda: 0.0, lambda: [np.zeros(3)], [np.zeros(4)])


class TestParameterCount:
    def test_dense_count(self):
        layer = Dense(5, 3, np.random.default_rng(0))
        assert parameter_count(layer.params()) == 5 * 3 + 3

    def test_spiral_conv_count(self):
        layer = SpiralConv(4, 3, 5, np.random.default_rng(0), hidden=8)
        want = (5 * 4) * 8 + 8 + 8 * 3 + 3
        assert parameter_count(layer.params()) == want
