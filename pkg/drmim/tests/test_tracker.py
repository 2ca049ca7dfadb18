"""
Tests of online tracking: window, penalties, peak selection and full sequence runs.
"""

import os
import tempfile
import time
import unittest
from dataclasses import replace

import numpy as np
from mock import patch

from drmim import tracker
from drmim.data import box_center, generate_synthetic, parse_groundtruth
from drmim.evaluation import overlaps, success_auc
from drmim.exception import ContractError
from drmim.selftest import tiny_spec
from drmim.tests.helpers import slow, tiny_model, tiny_sequence, tiny_synth_config
from drmim.trainer import TrainConfig, train


class ScoringTest(unittest.TestCase):

    def test_cosine_window(self):
        window = tracker.cosine_window(9)
        self.assertEqual(window.shape, (9, 9))
        self.assertEqual(window[4, 4], 1.0)
        self.assertEqual(window[0, 0], 0.0)
        np.testing.assert_allclose(window, window.T)

    def test_no_change_no_penalty(self):
        self.assertAlmostEqual(float(tracker.scale_penalty(30.0, 20.0, 30.0, 20.0, 0.04)), 1.0)

    def test_penalty_shrinks_with_change(self):
        mild = tracker.scale_penalty(33.0, 20.0, 30.0, 20.0, 0.04)
        strong = tracker.scale_penalty(60.0, 20.0, 30.0, 20.0, 0.04)
        self.assertTrue(strong < mild < 1.0)

    def test_select_peak(self):
        pscore = np.zeros((5, 5))
        pscore[0, 4] = 1.0
        window = tracker.cosine_window(5)
        self.assertEqual(tracker.select_peak(pscore, window, 0.0), (0, 4))
        self.assertEqual(tracker.select_peak(pscore, window, 1.0), (2, 2))


class TrackingTest(unittest.TestCase):

    def setUp(self):
        super().setUp()
        self.params = tiny_model(seed=2)
        self.sequence = tiny_sequence(seed=6, length=5)

    def test_init_rejects_tiny_box(self):
        with self.assertRaises(ContractError):
            tracker.init(self.sequence.frames[0], (10.0, 10.0, 1.0, 30.0), self.params)

    def test_init_state(self):
        state = tracker.init(self.sequence.frames[0], self.sequence.boxes[0], self.params)
        np.testing.assert_allclose(state.box, self.sequence.boxes[0])
        self.assertEqual(state.kernels['cls'].shape, (6, 2, 2))
        self.assertFalse(state.kernels['cls'].requires_grad)
        self.assertEqual(state.window.shape, (9, 9))

    def test_update_keeps_box_in_frame(self):
        state = tracker.init(self.sequence.frames[0], self.sequence.boxes[0], self.params)
        height, width = self.sequence.frames[1].shape[:2]
        new_state, box = tracker.update(state, self.sequence.frames[1], self.params)
        x, y, w, h = box
        self.assertTrue(np.all(np.isfinite(box)))
        self.assertTrue(tracker.MIN_BOX_SIZE <= w <= width and tracker.MIN_BOX_SIZE <= h <= height)
        self.assertTrue(0.0 <= x + w / 2.0 <= width and 0.0 <= y + h / 2.0 <= height)
        np.testing.assert_allclose(new_state.box, box)
        self.assertIs(new_state.kernels, state.kernels)

    def test_track_sequence(self):
        result = tracker.track_sequence(self.params, self.sequence)
        self.assertEqual(result.boxes.shape, (5, 4))
        np.testing.assert_array_equal(result.boxes[0], self.sequence.boxes[0])
        self.assertEqual(len(result.update_times), 4)
        self.assertGreater(result.fps, 0.0)

    def test_deterministic(self):
        first = tracker.track_sequence(self.params, self.sequence)
        second = tracker.track_sequence(self.params, self.sequence)
        np.testing.assert_array_equal(first.boxes, second.boxes)

    def test_timing_excludes_frame_loading(self):
        def slow_load(frame):
            time.sleep(0.3)
            return frame

        with patch('drmim.tracker._load', side_effect=slow_load):
            result = tracker.track_sequence(self.params, self.sequence)
        self.assertTrue(all(elapsed < 0.3 for elapsed in result.update_times))

    def test_too_short(self):
        with self.assertRaises(ContractError):
            tracker.track_sequence(self.params, tiny_sequence(length=1))

    def test_write_results(self):
        with tempfile.TemporaryDirectory() as directory:
            path = os.path.join(directory, 'out.txt')
            result = tracker.track_sequence(self.params, self.sequence)
            tracker.write_results(path, result.boxes)
            np.testing.assert_allclose(parse_groundtruth(path), result.boxes, rtol=1e-9)


class TrackResultTest(unittest.TestCase):

    def test_fps(self):
        self.assertEqual(tracker.TrackResult(np.zeros((3, 4)), [0.25, 0.25]).fps, 4.0)

    def test_zero_timings_are_rejected(self):
        with self.assertRaises(ContractError):
            tracker.TrackResult(np.zeros((2, 4)), [0.0]).fps  # pylint: disable=expression-not-assigned

    def test_no_timings_are_rejected(self):
        with self.assertRaises(ContractError):
            tracker.TrackResult(np.zeros((1, 4)), []).fps  # pylint: disable=expression-not-assigned


def static_sequence(seed, length):
    config = replace(tiny_synth_config(seed, length), velocity_range=(0.0, 0.0), drift_rate=0.0,
                     occluder_probability=0.0)
    return generate_synthetic(config)


@slow
class TrainedTrackingTest(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        sequences = [tiny_sequence(seed=seed, length=40) for seed in range(6)]
        cls.params, _ = train(TrainConfig(steps=300, batch=4), sequences, spec=tiny_spec())

    def test_trained_model_follows_target(self):
        held_out = tiny_sequence(seed=100, length=40)
        result = tracker.track_sequence(self.params, held_out)
        _, auc = success_auc(result.boxes, held_out.boxes)
        self.assertGreater(auc, 0.2)

    def test_static_target_is_held(self):
        sequence = static_sequence(200, 30)
        np.testing.assert_array_equal(sequence.boxes, np.repeat(sequence.boxes[:1], 30, axis=0))
        result = tracker.track_sequence(self.params, sequence)
        ious = overlaps(result.boxes, sequence.boxes)
        self.assertGreaterEqual(float(np.min(ious)), 0.6, ious)

    def test_update_on_the_init_frame_stays_put(self):
        sequence = tiny_sequence(seed=101, length=2)
        state = tracker.init(sequence.frames[0], sequence.boxes[0], self.params)
        _, box = tracker.update(state, sequence.frames[0], self.params)
        shift = np.hypot(*(np.array(box_center(box)) - np.array(box_center(sequence.boxes[0]))))
        self.assertLessEqual(shift, 2.0)
