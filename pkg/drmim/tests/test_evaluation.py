"""
Tests of the one-pass evaluation metrics, reports and plots.
"""

import os
import tempfile
import unittest

import numpy as np
import unicodecsv

from drmim import evaluation
from drmim.exception import ContractError

GT = np.array([[0.0, 0.0, 10.0, 10.0]] * 3)


def naive_auc(pred_boxes, gt_boxes):
    ious = []
    for (px, py, pw, ph), (gx, gy, gw, gh) in zip(pred_boxes, gt_boxes):
        width = max(0.0, min(px + pw, gx + gw) - max(px, gx))
        height = max(0.0, min(py + ph, gy + gh) - max(py, gy))
        inter = width * height
        ious.append(inter / (pw * ph + gw * gh - inter))
    thresholds = [index * 0.05 for index in range(21)]
    return sum(sum(iou > threshold for iou in ious) / len(ious) for threshold in thresholds) / 21.0


class PrecisionTest(unittest.TestCase):

    def test_identical_boxes(self):
        curve, precision20 = evaluation.precision_curve(GT, GT)
        self.assertEqual(precision20, 1.0)
        self.assertTrue(np.all(curve == 1.0))

    def test_headline_threshold(self):
        pred = GT + np.array([[5.0, 0, 0, 0], [25.0, 0, 0, 0], [10.0, 0, 0, 0]])
        np.testing.assert_allclose(evaluation.center_errors(pred, GT), [5.0, 25.0, 10.0])
        curve, precision20 = evaluation.precision_curve(pred, GT)
        self.assertAlmostEqual(precision20, 2.0 / 3.0)
        self.assertEqual(len(curve), 51)
        self.assertTrue(np.all(np.diff(curve) >= 0))

    def test_length_mismatch(self):
        with self.assertRaises(ContractError):
            evaluation.precision_curve(GT[:2], GT)


class SuccessTest(unittest.TestCase):

    def test_perfect_overlap(self):
        curve, auc = evaluation.success_auc(GT, GT)
        self.assertEqual(curve[-1], 0.0)
        self.assertAlmostEqual(auc, 20.0 / 21.0)

    def test_disjoint(self):
        _, auc = evaluation.success_auc(GT + 100.0 * np.array([1.0, 1.0, 0, 0]), GT)
        self.assertEqual(auc, 0.0)

    def test_matches_naive(self):
        rng = np.random.default_rng(0)
        gt = np.column_stack([rng.uniform(0, 50, size=(40, 2)), rng.uniform(5, 30, size=(40, 2))])
        pred = gt + rng.normal(scale=6.0, size=gt.shape)
        pred[:, 2:] = np.abs(pred[:, 2:]) + 1.0
        _, auc = evaluation.success_auc(pred, gt)
        self.assertAlmostEqual(auc, naive_auc(pred, gt), places=12)

    def test_no_boxes(self):
        with self.assertRaises(ContractError):
            evaluation.success_auc(np.zeros((0, 4)), np.zeros((0, 4)))


class FpsTest(unittest.TestCase):

    def test_rate(self):
        self.assertAlmostEqual(evaluation.fps_report([0.01] * 100), 100.0)

    def test_empty(self):
        with self.assertRaises(ContractError):
            evaluation.fps_report([])


class ReportTest(unittest.TestCase):

    def setUp(self):
        super().setUp()
        self.directory = tempfile.TemporaryDirectory()
        self.addCleanup(self.directory.cleanup)
        shifted = GT + np.array([30.0, 0, 0, 0])
        self.results = [
            evaluation.evaluate_sequence('exact', GT, GT, fps=50.0),
            evaluation.evaluate_sequence('shifted', shifted, GT, fps=30.0),
        ]

    def test_overall_weights_sequences_equally(self):
        overall = evaluation.overall_result(self.results)
        self.assertEqual(overall.sequence, evaluation.OVERALL)
        self.assertEqual(overall.frames, 6)
        self.assertAlmostEqual(overall.precision20, 0.5)
        self.assertAlmostEqual(overall.fps, 40.0)

    def test_overall_needs_results(self):
        with self.assertRaises(ContractError):
            evaluation.overall_result([])

    def test_write_report(self):
        path = os.path.join(self.directory.name, 'report.csv')
        evaluation.write_report(path, self.results)
        with open(path, 'rb') as handle:
            lines = handle.read().decode('utf-8').splitlines()
        self.assertEqual(lines[0], evaluation.REPORT_NOTE)
        rows = list(unicodecsv.reader([line.encode('utf-8') for line in lines[1:]], encoding='utf-8'))
        self.assertEqual(tuple(rows[0]), evaluation.REPORT_HEADER)
        self.assertEqual([row[0] for row in rows[1:]], ['exact', 'shifted', 'overall'])
        self.assertEqual(rows[1], ['exact', '3', '1.000000', '0.952381', '50.000'])
        self.assertEqual(rows[3][2], '0.500000')

    def test_plots_are_deterministic(self):
        first = os.path.join(self.directory.name, 'first.svg')
        second = os.path.join(self.directory.name, 'second.svg')
        for path in (first, second):
            evaluation.plot_success(path, self.results)
        with open(first, 'rb') as a, open(second, 'rb') as b:
            content = a.read()
            self.assertEqual(content, b.read())
        self.assertIn(b'<svg', content)

    def test_precision_plot(self):
        path = os.path.join(self.directory.name, 'precision.svg')
        evaluation.plot_precision(path, self.results)
        self.assertGreater(os.path.getsize(path), 0)
