"""
Tests of the synthetic benchmark harness and the desk-scale end-to-end runs.
"""

import os
import tempfile
import unittest

from drmim import benchmark
from drmim import config as drmim_config
from drmim.evaluation import overall_result
from drmim.tests.helpers import TINY_SETTINGS, slow
from drmim.trainer import train


def tiny_settings(**overrides):
    return drmim_config.build_settings(TINY_SETTINGS, overrides)


class HarnessTest(unittest.TestCase):

    def test_held_out_seeds_are_disjoint(self):
        settings = tiny_settings(train_sequences=2, eval_sequences=2, sequence_length=2)
        train_sequences, eval_sequences = benchmark.synthetic_benchmark(settings)
        train_names = {sequence.name for sequence in train_sequences}
        eval_names = {sequence.name for sequence in eval_sequences}
        self.assertEqual(len(train_names), 2)
        self.assertEqual(len(eval_names), 2)
        self.assertFalse(train_names & eval_names)

    def test_parameter_table_totals(self):
        spec = drmim_config.architecture_from(tiny_settings())
        prune = drmim_config.prune_from(tiny_settings(mu=0.5))
        rows = benchmark.parameter_table(spec, prune)
        self.assertEqual(rows[-2][0], 'total_network')
        self.assertEqual(int(rows[-2][4]), sum(int(row[4]) for row in rows[:-2] if not row[0].startswith('disc_')))
        self.assertEqual(int(rows[-1][4]), sum(int(row[4]) for row in rows[:-2]))


@slow
class EndToEndTest(unittest.TestCase):

    def test_desk_scale_run(self):
        settings = drmim_config.build_settings()
        train_sequences, eval_sequences = benchmark.synthetic_benchmark(settings)
        self.assertEqual((len(train_sequences), len(eval_sequences)), (20, 5))
        _, summary = benchmark.run_experiment(settings, train_sequences, eval_sequences)
        self.assertGreaterEqual(summary.precision20, 0.90)
        self.assertGreaterEqual(summary.auc, 0.50)

    def test_disentangling_terms_do_not_hurt(self):
        settings = tiny_settings(steps=300, batch=4, train_sequences=6, sequence_length=40)
        train_sequences, eval_sequences = benchmark.synthetic_benchmark(settings)
        _, configured = benchmark.run_experiment(settings, train_sequences, eval_sequences)
        zeroed_settings = drmim_config.build_settings(settings, {'rho': 0.0, 'gamma': 0.0, 'omega': 0.0})
        _, zeroed = benchmark.run_experiment(zeroed_settings, train_sequences, eval_sequences)
        self.assertGreaterEqual(configured.precision20, zeroed.precision20 - 0.02)

    def test_resumed_run_matches_uninterrupted(self):
        settings = tiny_settings(steps=300, batch=4, train_sequences=6, sequence_length=40)
        train_sequences, eval_sequences = benchmark.synthetic_benchmark(settings)
        spec = drmim_config.architecture_from(settings)
        tracker_config = drmim_config.tracker_config_from(settings)
        uninterrupted, _ = train(drmim_config.train_config_from(settings), train_sequences, spec=spec)

        with tempfile.TemporaryDirectory() as directory:
            path = os.path.join(directory, 'model.ckpt')
            half = drmim_config.build_settings(settings, {'steps': settings['steps'] // 2})
            train(drmim_config.train_config_from(half, checkpoint_path=path), train_sequences, spec=spec)
            resumed, records = train(drmim_config.train_config_from(settings), train_sequences, spec=spec,
                                     resume_from=path)
        self.assertEqual(records[0].step, settings['steps'] // 2 + 1)
        self.assertEqual(resumed.step, settings['steps'])

        first = overall_result(benchmark.evaluate_params(uninterrupted, eval_sequences, tracker_config))
        second = overall_result(benchmark.evaluate_params(resumed, eval_sequences, tracker_config))
        self.assertLessEqual(abs(first.precision20 - second.precision20), 0.02)
