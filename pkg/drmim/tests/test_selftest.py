"""
Tests of the built-in verification suite.
"""

import unittest

import numpy as np

from drmim import core, gradcheck, model, selftest
from drmim.core import Tensor


def broken_square(tensor):
    # Analytic gradient is off by a factor of two.
    data = tensor.data
    return core._record(data * data, (tensor,), lambda g: (g * data,), 'broken_square')  # pylint: disable=protected-access


class ChecksTest(unittest.TestCase):

    def test_gradients(self):
        result = selftest.check_gradients(seeds=1)
        self.assertTrue(result.passed, result.detail)
        self.assertEqual(result.name, 'gradients')

    def test_jsd_identities(self):
        self.assertTrue(selftest.check_jsd_identities(configurations=200).passed)

    def test_xcorr_oracle(self):
        self.assertTrue(selftest.check_xcorr_oracle(instances=20).passed)

    def test_naive_xcorr(self):
        template = np.ones((1, 2, 2))
        search = np.arange(9, dtype=np.float64).reshape(1, 3, 3)
        np.testing.assert_array_equal(selftest.naive_xcorr(template, search), [[[8.0, 12.0], [20.0, 24.0]]])

    def test_pruning_accounting(self):
        result = selftest.check_pruning_accounting()
        self.assertTrue(result.passed, result.detail)

    def test_oracle_agrees_with_model_on_tiny_spec(self):
        spec = selftest.tiny_spec()
        for mu in (0.0, 0.3, 0.5):
            self.assertEqual(selftest.oracle_parameter_count(spec, mu),
                             model.parameter_count(spec, model.PruneConfig(mu)))

    def test_loss_assembly(self):
        self.assertTrue(selftest.check_loss_assembly().passed)

    def test_broken_gradient_is_caught(self):
        error = gradcheck.gradcheck(broken_square, [Tensor(np.random.default_rng(0).normal(size=(3,)))])
        self.assertGreater(error, 0.1)

    def test_run_selftest(self):
        with self.assertLogs('drmim.selftest', 'INFO') as logs:
            results = selftest.run_selftest(gradient_seeds=1)
        self.assertEqual(
            [result.name for result in results],
            ['gradients', 'jsd_identities', 'xcorr_oracle', 'pruning_accounting', 'loss_assembly']
        )
        self.assertTrue(all(result.passed for result in results))
        self.assertTrue(all('PASS' in line for line in logs.output))
