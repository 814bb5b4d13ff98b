import time
import unittest

import numpy as np

from plasticity_lab.gradcheck import CASE_KINDS, _rel_error, build_case, check_case, run_gradcheck
from plasticity_lab.layers import ACTIVATION_FUNCTIONS, Activation


class TestGradcheck(unittest.TestCase):
    def test_hundred_cases_pass_within_a_minute(self):
        start = time.perf_counter()
        report = run_gradcheck(cases=100, seed=0)
        elapsed = time.perf_counter() - start
        self.assertEqual(len(report.results), 100)
        self.assertEqual([r.case.name for r in report.failures], [])
        self.assertTrue(report.passed)
        self.assertLess(report.max_error, 1e-5)
        self.assertLess(elapsed, 60)
        self.assertEqual({r.case.kind for r in report.results}, set(CASE_KINDS))

    def test_every_activation_function_is_checked(self):
        functions = {
            layer.function
            for i in range(100)
            for layer in build_case(CASE_KINDS[i % len(CASE_KINDS)], i).spec.layers
            if isinstance(layer, Activation) and CASE_KINDS[i % len(CASE_KINDS)] == "activation"
        }
        self.assertEqual(functions, set(ACTIVATION_FUNCTIONS))

    def test_other_seed(self):
        self.assertTrue(run_gradcheck(cases=len(CASE_KINDS), seed=7).passed)

    def test_case_is_deterministic(self):
        a = check_case(build_case("batch_norm", 3), index=3)
        b = check_case(build_case("batch_norm", 3), index=3)
        self.assertEqual(a.max_rel_error, b.max_rel_error)
        self.assertGreater(a.coordinates, 0)
        self.assertEqual(set(a.to_dict()), {"case", "max_rel_error", "worst_tensor", "coordinates", "passed"})

    def test_wrong_gradient_is_caught(self):
        self.assertAlmostEqual(_rel_error(np.array([1.0, 2.0]), np.array([1.0, 1.0])), 0.5)
        self.assertEqual(_rel_error(np.zeros(3), np.zeros(3)), 0.0)

    def test_unknown_kind(self):
        with self.assertRaises(ValueError):
            build_case("attention", 0)


if __name__ == "__main__":
    unittest.main()
