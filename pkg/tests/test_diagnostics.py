import unittest

import numpy as np
from scipy.linalg import eigvalsh
from scipy.optimize import minimize

from plasticity_lab.diagnostics import (
    diag_rank1_residual, entk_from_gradients, entk_gram, explicit_jacobian, feature_svd, first_order_loss_decrease,
    full_report, gradient_alignment_census, linearization_probe, numeric_rank, param_norms,
    preactivation_stats, predictive_entropy, rank_bound_check, sharpness_top_eig, top_hessian_eigenvalue, unit_census,
)
from plasticity_lab.layers import Activation, Dense
from plasticity_lab.losses import mse_loss, xent_loss
from plasticity_lab.network import (
    NetworkSpec, absolute_value_init, flatten_params, forward, init_network, mlp_spec, per_sample_output_gradient,
    unflatten_params,
)
from plasticity_lab.utils import ConfigError, PreconditionError, substream


def gaussian(n, d, seed=0):
    return substream(seed, "probe").normal(size=(n, d))


def finite_difference_jacobian(net, x, output_index, h=1e-5):
    """columns are central differences of one output over every parameter"""
    theta = flatten_params(net.params)
    work = net.copy()
    columns = []
    for k in range(theta.shape[0]):
        values = []
        for sign in (1, -1):
            moved = theta.copy()
            moved[k] += sign * h
            work.params = unflatten_params(net.params, moved)
            values.append(forward(work, x, "eval")[0][:, output_index])
        columns.append((values[0] - values[1]) / (2 * h))
    return np.stack(columns, axis=1)


def deep_linear_spec(d, width, depth, seed):
    layers = [Dense(d, width, has_bias=False)]
    for _ in range(depth - 1):
        layers += [Activation("identity"), Dense(width, width, has_bias=False)]
    layers += [Activation("identity"), Dense(width, 1, has_bias=False)]
    return NetworkSpec(layers=tuple(layers), input_shape=(d,), seed=seed)


def restart_fit(K, restarts=20, seed=0):
    """best relative residual of K - diag(d) - uu^T over random L-BFGS starts in (d, u)"""
    n = K.shape[0]
    norm = np.linalg.norm(K)

    def objective(z):
        E = K - np.diag(z[:n]) - np.outer(z[n:], z[n:])
        return float((E * E).sum()), np.concatenate([-2 * np.diag(E), -4 * (E @ z[n:])])

    rng = np.random.default_rng(seed)
    best = np.inf
    for _ in range(restarts):
        z0 = rng.normal(size=2 * n) * np.sqrt(norm / n)
        result = minimize(objective, z0, jac=True, method="L-BFGS-B", options={"maxiter": 10000, "ftol": 1e-16, "gtol": 1e-12})
        best = min(best, np.sqrt(max(result.fun, 0.0)) / norm)
    return best


class TestCensus(unittest.TestCase):
    def test_absolute_value_init_makes_zombies(self):
        net = absolute_value_init(init_network(mlp_spec(6, 2, 16, 2), 0))
        x = substream(0, "probe").uniform(0.1, 1.0, size=(64, 6))
        census = unit_census(net, x)
        self.assertEqual([layer.layer for layer in census.layers], [1, 3])
        self.assertEqual(census.layers[1].zombie_fraction, 1.0)
        self.assertEqual(census.dead_count, 0)

    def test_dead_units(self):
        net = init_network(mlp_spec(3, 2, 4, 1), 0)
        net.params["0.bias"][:2] = -1e3
        census = unit_census(net, gaussian(32, 3))
        self.assertEqual(census.dead_count, 2)
        self.assertAlmostEqual(census.dead_fraction, 0.5)

    def test_smooth_activations_saturate(self):
        net = init_network(mlp_spec(3, 2, 4, 1, activation="tanh"), 0)
        net.params["0.bias"][0] = 50.0
        census = unit_census(net, gaussian(32, 3))
        self.assertEqual(census.layers[0].saturated[0], True)
        self.assertEqual(census.layers[0].dead.sum(), 0)

    def test_probe_too_small(self):
        net = init_network(mlp_spec(3, 2, 4, 1), 0)
        with self.assertRaises(PreconditionError):
            unit_census(net, gaussian(8, 3))
        self.assertEqual(unit_census(net, gaussian(8, 3), min_batch=8).num_units, 4)

    def test_preactivation_drift(self):
        net = init_network(mlp_spec(3, 2, 4, 2), 0)
        _, trace = forward(net, gaussian(16, 3), "eval")
        ref = preactivation_stats(trace)
        again = preactivation_stats(trace, ref)
        self.assertEqual(again.mean_drift, {1: 0.0, 3: 0.0})
        self.assertIn("var_drift", again.to_dict())

    def test_param_norms(self):
        net = init_network(mlp_spec(3, 2, 4, 1), 0)
        norms = param_norms(net)
        self.assertEqual(sorted(norms.per_layer), [0, 2])
        flat = np.concatenate([v.ravel() for v in net.params.values()])
        self.assertAlmostEqual(norms.total, float(np.linalg.norm(flat)))


class TestENTK(unittest.TestCase):
    def test_gram_matches_batched_jacobian(self):
        net = init_network(mlp_spec(4, 3, 8, 2, activation="tanh", norm="layer"), 0)
        x = gaussian(10, 4)
        report = entk_gram(net, x, output_index=2)
        J = explicit_jacobian(net, x, output_index=2)
        K = J @ J.T
        self.assertLess(np.abs(report.gram - K).max() / np.abs(K).max(), 1e-8)
        np.testing.assert_allclose(np.diag(report.cosine), 1.0)
        self.assertTrue((np.diff(report.eigenvalues) <= 1e-12).all())

    def test_gram_matches_finite_difference_jacobian(self):
        activations = ("relu", "tanh", "leaky_relu", "gelu", "identity")
        for seed in range(10):
            with self.subTest(seed=seed):
                spec = mlp_spec(3, 2, 6, 2, activation=activations[seed % len(activations)], seed=seed)
                net = init_network(spec, seed)
                self.assertLessEqual(net.num_params, 5000)
                x = gaussian(8, 3, seed=seed)
                output_index = seed % 2
                J = finite_difference_jacobian(net, x, output_index)
                report = entk_gram(net, x, output_index)
                self.assertLess(np.abs(report.gram - J @ J.T).max(), 1e-8)
                self.assertGreaterEqual(eigvalsh(report.gram).min(), -1e-8)
                for i in (0, 7):
                    self.assertLess(np.abs(per_sample_output_gradient(net, x[i], output_index) - J[i]).max(), 1e-6)

    def test_zero_gradient_rows(self):
        grads = np.array([[1.0, 0.0], [0.0, 0.0], [1.0, 1.0]])
        report = entk_from_gradients(grads)
        np.testing.assert_array_equal(report.cosine_defined, [True, False, True])
        self.assertEqual(report.cosine[1, 1], 0.0)
        self.assertAlmostEqual(report.cosine[0, 2], 1 / np.sqrt(2))

    def test_batch_limit(self):
        net = init_network(mlp_spec(2, 1, 4, 1), 0)
        with self.assertRaises(ConfigError):
            entk_gram(net, gaussian(65, 2))

    def test_first_order_decrease_predicts_sgd_step(self):
        net = init_network(NetworkSpec(layers=(Dense(3, 1, has_bias=False),), input_shape=(3,)), 0)
        x, y = gaussian(6, 3), gaussian(6, 1, seed=1)
        lr = 1e-5
        out, _ = forward(net, x, "eval")
        before, grad = mse_loss(out, y)
        K = entk_gram(net, x).gram
        predicted = first_order_loss_decrease(K, (out - y)[:, 0], lr)
        w = net.params["0.weight"] - lr * (grad.T @ x)
        after, _ = mse_loss(x @ w.T, y)
        self.assertAlmostEqual((after - before) / predicted, 1.0, places=3)


class TestRank(unittest.TestCase):
    def test_numeric_rank(self):
        self.assertEqual(numeric_rank(np.outer([1, 2, 3], [1, 1])), 1)
        self.assertEqual(numeric_rank(np.zeros((3, 3))), 0)
        self.assertEqual(numeric_rank(np.eye(4)), 4)

    def test_diag_rank1_residual_exact_cases(self):
        self.assertLess(diag_rank1_residual(np.diag([3.0, 1.0, 2.0])), 1e-10)
        u = np.array([1.0, -2.0, 0.5, 3.0])
        self.assertLess(diag_rank1_residual(np.outer(u, u)), 1e-10)
        self.assertEqual(diag_rank1_residual(np.zeros((3, 3))), 0.0)

    def test_diag_rank1_residual_matches_restarted_fit(self):
        for seed in range(10):
            with self.subTest(seed=seed):
                B = gaussian(8, 8, seed=seed)
                K = B @ B.T
                self.assertAlmostEqual(diag_rank1_residual(K), restart_fit(K, seed=seed), delta=1e-6)

    def test_diag_rank1_residual_is_deterministic(self):
        B = gaussian(8, 8, seed=3)
        K = B @ B.T
        self.assertEqual(diag_rank1_residual(K), diag_rank1_residual(K))

    def test_diag_rank1_residual_of_rank_two(self):
        a, b = np.array([1.0, 0, 1, 0]), np.array([0, 1.0, 0, 1])
        self.assertGreater(diag_rank1_residual(np.outer(a, a) + np.outer(b, b)), 0.1)

    def test_diag_rank1_needs_symmetric(self):
        with self.assertRaises(ConfigError):
            diag_rank1_residual(np.array([[1.0, 2.0], [0.0, 1.0]]))

    def test_deep_linear_rank_bound(self):
        for seed in range(50):
            input_rank = 1 + seed % 5
            with self.subTest(seed=seed, input_rank=input_rank):
                rng = np.random.default_rng(seed)
                x = rng.normal(size=(12, input_rank)) @ rng.normal(size=(input_rank, 8))
                net = init_network(deep_linear_spec(8, 10, 1 + seed % 3, seed), seed)
                result = rank_bound_check(net, x)
                self.assertEqual(result.input_rank, input_rank)
                self.assertLessEqual(result.entk_rank, input_rank)
                self.assertTrue(result.bound_holds)

    def test_biases_add_one_to_the_input_rank(self):
        x = gaussian(12, 1) @ gaussian(1, 6, seed=1)
        result = rank_bound_check(init_network(mlp_spec(6, 1, 8, 3, activation="identity"), 0), x)
        self.assertEqual(result.input_rank, 2)
        self.assertTrue(result.bound_holds)

    def test_rank_bound_needs_linear_network(self):
        net = init_network(mlp_spec(3, 1, 4, 1, activation="identity", norm="layer"), 0)
        with self.assertRaises(PreconditionError):
            rank_bound_check(net, gaussian(8, 3))

    def test_linearization_probe(self):
        net = init_network(mlp_spec(3, 1, 4, 1, activation="relu"), 0)
        # all preactivations positive: every relu unit sits on its linear piece
        net.params["0.bias"][:] = 1e3
        self.assertTrue(linearization_probe(net, gaussian(8, 3)).fully_linearized)
        net.params["0.bias"][0] = 0.0
        net.params["0.weight"][0] = [1.0, 0.0, 0.0]
        x = np.array([[1.0, 0, 0], [-1.0, 0, 0]])
        self.assertEqual(linearization_probe(net, x).constant_slope_fraction[1], 0.75)


class TestFeatureSVD(unittest.TestCase):
    def setUp(self):
        self.net = init_network(mlp_spec(4, 2, 5, 1, activation="tanh"), 0)

    def test_rank_one_features(self):
        x = np.outer(np.arange(1.0, 9.0), [1.0, -1.0, 2.0, 0.5])
        report = feature_svd(self.net, x, layer=0)
        self.assertEqual(int((report.singular_values > 1e-10 * report.singular_values[0]).sum()), 1)
        self.assertEqual(report.srank, 1)
        self.assertEqual(report.top_direction_outputs.shape, (8, 2))

    def test_orthonormal_features(self):
        report = feature_svd(self.net, np.eye(4), layer=0)
        self.assertEqual(report.srank, 4)

    def test_matches_gram_eigenvalues(self):
        x = gaussian(16, 4)
        report = feature_svd(self.net, x)
        _, trace = forward(self.net, x, "eval")
        F = trace.inputs[-1]
        eig = np.sqrt(np.clip(eigvalsh(F.T @ F)[::-1], 0, None))
        np.testing.assert_allclose(report.singular_values, eig, atol=1e-8)

    def test_invariant_to_sample_order(self):
        x = gaussian(16, 4)
        a = feature_svd(self.net, x).singular_values
        b = feature_svd(self.net, x[::-1]).singular_values
        np.testing.assert_allclose(a, b, atol=1e-8)


class TestSharpness(unittest.TestCase):
    def test_quadratic(self):
        q, _ = np.linalg.qr(substream(1, "probe").normal(size=(4, 4)))
        A = q @ np.diag([5.0, 2.0, 1.0, -0.5]) @ q.T
        report = top_hessian_eigenvalue(lambda theta: A @ theta, np.ones(4))
        self.assertTrue(report.converged)
        self.assertAlmostEqual(report.eigenvalue, 5.0, delta=1e-3)
        self.assertGreater(report.iterations, 0)

    def test_random_quadratics(self):
        for i, n in enumerate(np.linspace(2, 50, 20).astype(int)):
            with self.subTest(n=n):
                B = gaussian(n, n, seed=i)
                A = B @ B.T / n
                theta = gaussian(1, n, seed=100 + i)[0]
                report = top_hessian_eigenvalue(lambda t: A @ t + 1.0, theta, seed=i)
                self.assertTrue(report.converged)
                self.assertAlmostEqual(report.eigenvalue, eigvalsh(A)[-1], delta=1e-3)

    def test_one_parameter(self):
        report = top_hessian_eigenvalue(lambda t: 3.0 * t, np.array([2.0]))
        self.assertAlmostEqual(report.eigenvalue, 3.0, places=6)

    def test_linear_regression_hessian(self):
        net = init_network(NetworkSpec(layers=(Dense(3, 1, has_bias=False),), input_shape=(3,)), 0)
        x, y = gaussian(10, 3), gaussian(10, 1, seed=2)
        report = sharpness_top_eig(net, lambda out: mse_loss(out, y), x)
        expected = eigvalsh(2 / 10 * x.T @ x)[-1]
        self.assertAlmostEqual(report.eigenvalue / expected, 1.0, delta=1e-3)


class TestMisc(unittest.TestCase):
    def test_entropy(self):
        self.assertAlmostEqual(predictive_entropy(np.zeros((2, 4))), np.log(4))
        self.assertAlmostEqual(predictive_entropy(np.array([[100.0, -100.0]])), 0.0)

    def test_alignment_census(self):
        net = init_network(mlp_spec(3, 3, 6, 2), 0)
        x = gaussian(16, 3)
        out, trace = forward(net, x, "eval")
        _, grad = xent_loss(out, np.zeros(16, dtype=int))
        census = gradient_alignment_census(net, trace, grad)
        self.assertEqual(sorted(census.negative), [1, 3])
        for fraction in (*census.negative.values(), *census.positive.values()):
            self.assertTrue(0.0 <= fraction <= 1.0)

    def test_full_report(self):
        net = init_network(mlp_spec(3, 3, 6, 1), 0)
        report = full_report(net, gaussian(40, 3), entk_size=8, svd_size=16)
        self.assertEqual(set(report), {"param_norms", "census", "entropy", "entk", "svd"})
        self.assertEqual(len(report["entk"]["gram"]), 8)


if __name__ == "__main__":
    unittest.main()
