import unittest

from hypothesis import given, settings, strategies as st
import numpy as np

from plasticity_lab.layers import (
    ACTIVATION_FUNCTIONS, Activation, BatchNorm, Conv2D, DecomposedNorm, Dense, Flatten, LayerNorm,
    activation_derivative, activation_value, layer_from_dict, layer_to_dict,
)
from plasticity_lab.utils import ConfigError, PreconditionError, ShapeError


def naive_conv(x, weight, bias, stride):
    b, c, h, w = x.shape
    o, _, k, _ = weight.shape
    oh, ow = (h - k) // stride + 1, (w - k) // stride + 1
    y = np.zeros((b, o, oh, ow))
    for i in range(oh):
        for j in range(ow):
            patch = x[:, :, i * stride:i * stride + k, j * stride:j * stride + k]
            y[:, :, i, j] = np.einsum("bcij,ocij->bo", patch, weight) + bias
    return y


class TestDense(unittest.TestCase):
    def test_forward_backward(self):
        rng = np.random.default_rng(0)
        layer = Dense(3, 2)
        params = {"weight": rng.normal(size=(2, 3)), "bias": rng.normal(size=2)}
        x = rng.normal(size=(4, 3))
        y, cache, _ = layer.forward(params, {}, x, train=True)
        np.testing.assert_allclose(y, x @ params["weight"].T + params["bias"])
        g = rng.normal(size=(4, 2))
        dx, grads = layer.backward(params, cache, g)
        np.testing.assert_allclose(dx, g @ params["weight"])
        np.testing.assert_allclose(grads["weight"], g.T @ x)
        np.testing.assert_allclose(grads["bias"], g.sum(axis=0))

    def test_no_bias_and_shape_checks(self):
        self.assertEqual(Dense(3, 2, has_bias=False).param_shapes((3,)), {"weight": (2, 3)})
        with self.assertRaises(ShapeError):
            Dense(3, 2).out_shape((4,))
        with self.assertRaises(ConfigError):
            Dense(0, 2)


class TestConv2D(unittest.TestCase):
    def test_matches_naive_convolution(self):
        rng = np.random.default_rng(1)
        for stride in (1, 2):
            layer = Conv2D(2, 3, 3, stride=stride)
            params = {"weight": rng.normal(size=(3, 2, 3, 3)), "bias": rng.normal(size=3)}
            x = rng.normal(size=(2, 2, 7, 7))
            y, _, _ = layer.forward(params, {}, x, train=False)
            np.testing.assert_allclose(y, naive_conv(x, params["weight"], params["bias"], stride), atol=1e-12)
            self.assertEqual(y.shape[1:], layer.out_shape((2, 7, 7)))

    def test_same_padding_keeps_size(self):
        self.assertEqual(Conv2D(1, 4, 3, padding="same").out_shape((1, 9, 9)), (4, 9, 9))
        self.assertEqual(Conv2D(1, 4, 3, stride=2, padding="same").out_shape((1, 9, 9)), (4, 5, 5))

    def test_kernel_larger_than_input(self):
        with self.assertRaises(ShapeError):
            Conv2D(1, 1, 5).out_shape((1, 3, 3))

    def test_input_gradient_is_adjoint(self):
        # <conv(x), g> is linear in x, so its gradient is the transposed convolution
        rng = np.random.default_rng(2)
        layer = Conv2D(2, 2, 3, stride=2, padding="same")
        params = {"weight": rng.normal(size=(2, 2, 3, 3)), "bias": np.zeros(2)}
        x = rng.normal(size=(1, 2, 5, 5))
        y, cache, _ = layer.forward(params, {}, x, train=True)
        g = rng.normal(size=y.shape)
        dx, _ = layer.backward(params, cache, g)
        dx_check = rng.normal(size=x.shape)
        y2, _, _ = layer.forward(params, {}, dx_check, train=True)
        self.assertAlmostEqual(float((y2 * g).sum()), float((dx * dx_check).sum()), places=10)


class TestFlatten(unittest.TestCase):
    def test_round_trip_shapes(self):
        x = np.arange(24.0).reshape(2, 3, 2, 2)
        y, cache, _ = Flatten().forward({}, {}, x, train=True)
        self.assertEqual(y.shape, (2, 12))
        dx, _ = Flatten().backward({}, cache, y)
        np.testing.assert_array_equal(dx, x)


class TestActivation(unittest.TestCase):
    @settings(max_examples=50, deadline=None)
    @given(
        st.sampled_from(ACTIVATION_FUNCTIONS),
        st.floats(min_value=-5, max_value=5).filter(lambda z: abs(z) > 1e-3),
    )
    def test_derivative_matches_finite_difference(self, function, z):
        h = 1e-6
        numeric = (activation_value(function, np.array(z + h)) - activation_value(function, np.array(z - h))) / (2 * h)
        self.assertAlmostEqual(float(activation_derivative(function, np.array(z))), float(numeric), places=5)

    def test_input_offset_shifts_preactivation(self):
        layer = Activation("relu", input_offset=-1.0)
        y, z, _ = layer.forward({}, {}, np.array([[0.5, 2.0]]), train=True)
        np.testing.assert_allclose(z, [[-0.5, 1.0]])
        np.testing.assert_allclose(y, [[0.0, 1.0]])
        dx, _ = layer.backward({}, z, np.ones((1, 2)))
        np.testing.assert_allclose(dx, [[0.0, 1.0]])

    def test_unknown_function(self):
        with self.assertRaises(ConfigError):
            Activation("swish")


class TestNorms(unittest.TestCase):
    def test_layer_norm_normalizes_each_sample(self):
        rng = np.random.default_rng(3)
        layer = LayerNorm()
        x = rng.normal(3.0, 5.0, size=(4, 16))
        y, _, _ = layer.forward({"gain": np.ones(16), "shift": np.zeros(16)}, {}, x, train=True)
        np.testing.assert_allclose(y.mean(axis=1), 0.0, atol=1e-12)
        np.testing.assert_allclose(y.var(axis=1), 1.0, atol=1e-5)

    def test_batch_norm_tracks_running_statistics(self):
        rng = np.random.default_rng(4)
        layer = BatchNorm(momentum=0.5)
        params = {"gain": np.ones(3), "shift": np.zeros(3)}
        buffers = {"running_mean": np.zeros(3), "running_var": np.ones(3)}
        x = rng.normal(2.0, 1.0, size=(8, 3))
        y, _, new = layer.forward(params, buffers, x, train=True)
        np.testing.assert_allclose(y.mean(axis=0), 0.0, atol=1e-12)
        np.testing.assert_allclose(new["running_mean"], 0.5 * x.mean(axis=0))
        _, _, none = layer.forward(params, buffers, x, train=True, update_stats=False)
        self.assertIsNone(none)
        # eval mode uses the stored statistics
        y_eval, _, stored = layer.forward(params, new, x, train=False)
        self.assertIsNone(stored)
        np.testing.assert_allclose(y_eval, (x - new["running_mean"]) / np.sqrt(new["running_var"] + layer.eps))

    def test_batch_statistics_need_two_samples(self):
        with self.assertRaises(PreconditionError):
            BatchNorm().forward(
                {"gain": np.ones(2), "shift": np.zeros(2)}, {"running_mean": np.zeros(2), "running_var": np.ones(2)},
                np.ones((1, 2)), train=True,
            )

    def test_decomposed_norm_scale_only(self):
        layer = DecomposedNorm(center_axis="none", scale_axis="feature")
        x = np.array([[3.0, 4.0]])
        y, _, _ = layer.forward({}, {}, x, train=False)
        # divides by the root mean square, does not center
        np.testing.assert_allclose(y, x / np.sqrt(12.5 + layer.eps))
        self.assertEqual(layer.param_shapes((2,)), {})
        self.assertEqual(layer.buffer_shapes((2,)), {})

    def test_norm_on_images_is_per_channel(self):
        layer = BatchNorm()
        self.assertEqual(layer.param_shapes((4, 5, 5)), {"gain": (4,), "shift": (4,)})
        self.assertEqual(layer.buffer_shapes((4, 5, 5)), {"running_mean": (4,), "running_var": (4,)})


class TestSerialization(unittest.TestCase):
    def test_layer_dict_round_trip(self):
        for layer in (Dense(3, 2, has_bias=False), Conv2D(1, 2, 3, 2, "same"), Flatten(), Activation("abs", input_offset=1.5),
                      LayerNorm(), BatchNorm(momentum=0.2), DecomposedNorm("batch", "none", affine=True)):
            self.assertEqual(layer_from_dict(layer_to_dict(layer)), layer)

    def test_unknown_kind_and_key(self):
        with self.assertRaises(ConfigError):
            layer_from_dict({"kind": "attention"})
        with self.assertRaises(ConfigError):
            layer_from_dict({"kind": "dense", "in_features": 2, "out_features": 2, "dropout": 0.1})


if __name__ == "__main__":
    unittest.main()
