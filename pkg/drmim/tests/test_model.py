"""
Tests of the network definition: geometry, pruning accounting, initialization and forward passes.
"""

import unittest

import ddt
import numpy as np

from drmim import core, model
from drmim.core import Tensor
from drmim.exception import ConfigurationError, DimensionError
from drmim.selftest import oracle_parameter_count, tiny_spec
from drmim.tests.helpers import tiny_model


class ArchitectureTest(unittest.TestCase):

    def test_default_geometry(self):
        spec = model.ArchitectureSpec.default()
        self.assertEqual(spec.template_feature_size, 6)
        self.assertEqual(spec.search_feature_size, 26)
        self.assertEqual(spec.score_size, 21)
        self.assertEqual(spec.total_stride, 8)
        self.assertEqual(spec.score_offset, 47.5)

    def test_tiny_geometry(self):
        spec = tiny_spec()
        self.assertEqual(spec.template_feature_size, 2)
        self.assertEqual(spec.search_feature_size, 10)
        self.assertEqual(spec.score_size, 9)
        self.assertEqual(spec.score_offset, 31.5)

    def test_template_must_be_smaller(self):
        with self.assertRaises(ConfigurationError):
            model.ArchitectureSpec(template_size=256, search_size=256)

    def test_mismatched_backbone_lists(self):
        with self.assertRaises(ConfigurationError):
            model.ArchitectureSpec(backbone_widths=(8, 8))

    def test_even_head_kernel(self):
        with self.assertRaises(ConfigurationError):
            tiny_spec(head_kernel=2)


@ddt.ddt
class PruningTest(unittest.TestCase):

    @ddt.data((64, 0.5, 32), (96, 0.5, 48), (3, 0.5, 2), (5, 0.1, 5), (64, 0.0, 64))
    @ddt.unpack
    def test_pruned_width(self, channels, mu, expected):
        self.assertEqual(model.pruned_width(channels, mu), expected)

    def test_zero_width(self):
        with self.assertRaises(ConfigurationError):
            model.pruned_width(1, 0.9)

    @ddt.data(-0.1, 0.95, 1.0)
    def test_ratio_out_of_range(self, mu):
        with self.assertRaises(ConfigurationError):
            model.PruneConfig(mu)

    @ddt.data(0.0, 0.2, 0.5, 0.8)
    def test_count_matches_oracle(self, mu):
        for spec in (model.ArchitectureSpec.default(), tiny_spec(), tiny_spec(use_dr=False)):
            self.assertEqual(model.parameter_count(spec, model.PruneConfig(mu)), oracle_parameter_count(spec, mu))

    def test_half_pruning_shrinks_below_forty_percent(self):
        spec = model.ArchitectureSpec.default()
        ratio = model.parameter_count(spec, model.PruneConfig(0.5)) / model.parameter_count(spec)
        self.assertLess(ratio, 0.4)

    def test_counts_decrease_with_ratio(self):
        spec = model.ArchitectureSpec.default()
        counts = [model.parameter_count(spec, model.PruneConfig(mu)) for mu in (0.0, 0.2, 0.4, 0.6, 0.8)]
        self.assertEqual(counts, sorted(counts, reverse=True))

    def test_unpruned_channels(self):
        layers = {layer.name: layer for layer in model.plan_layers(tiny_spec(), model.PruneConfig(0.5))}
        self.assertEqual(layers['backbone.0'].in_channels, 3)
        self.assertEqual(layers['head_reg.1'].out_channels, 4)
        self.assertEqual(layers['head_cls.1'].out_channels, 1)
        self.assertEqual(layers['backbone.0'].out_channels, 2)

    def test_discriminators_excluded_from_network_count(self):
        spec = tiny_spec()
        self.assertGreater(model.parameter_count(spec, include_discriminators=True), model.parameter_count(spec))
        baseline = tiny_spec(use_dr=False)
        self.assertEqual(
            model.parameter_count(baseline, include_discriminators=True), model.parameter_count(baseline)
        )

    def test_spec_hash_depends_on_ratio(self):
        spec = tiny_spec()
        self.assertEqual(model.spec_hash(spec), model.spec_hash(spec, model.PruneConfig(0.0)))
        self.assertNotEqual(model.spec_hash(spec), model.spec_hash(spec, model.PruneConfig(0.5)))
        self.assertNotEqual(model.spec_hash(spec), model.spec_hash(tiny_spec(use_dr=False)))


class BuildTest(unittest.TestCase):

    def test_same_seed_same_weights(self):
        first, second = tiny_model(seed=5), tiny_model(seed=5)
        for name, tensor in first.items():
            np.testing.assert_array_equal(tensor.data, second[name].data)

    def test_different_seed_different_weights(self):
        self.assertFalse(np.array_equal(tiny_model(seed=1)['backbone.0.weight'].data,
                                        tiny_model(seed=2)['backbone.0.weight'].data))

    def test_shapes_and_initialization(self):
        params = tiny_model()
        self.assertEqual(list(params), list(model.layer_shapes(params.spec, params.prune)))
        for name, shape in model.layer_shapes(params.spec, params.prune).items():
            self.assertEqual(params[name].shape, shape)
            self.assertTrue(params[name].requires_grad)
            if name.endswith('.bias'):
                self.assertFalse(np.any(params[name].data))
        self.assertLess(np.std(params['head_cls.1.weight'].data), 0.05)
        self.assertEqual(params.parameter_count(), model.parameter_count(params.spec, params.prune))

    def test_copy_is_independent(self):
        params = tiny_model()
        clone = params.copy()
        clone['backbone.0.bias'].data[:] = 1.0
        self.assertFalse(np.any(params['backbone.0.bias'].data))

    def test_unknown_block(self):
        with self.assertRaises(DimensionError):
            tiny_model(use_dr=False).block_layers('dr_related')


class ForwardTest(unittest.TestCase):

    def setUp(self):
        super().setUp()
        self.params = tiny_model(seed=3)
        rng = np.random.default_rng(0)
        self.template = Tensor(rng.random((3, 64, 64)))
        self.search = Tensor(rng.random((3, 128, 128)))

    def test_pair_forward_shapes(self):
        head = model.pair_forward(self.params, self.template, self.search)
        self.assertEqual(head.cls_logits.shape, (1, 9, 9))
        self.assertEqual(head.quality_logits.shape, (1, 9, 9))
        self.assertEqual(head.reg_offsets.shape, (4, 9, 9))
        self.assertTrue(np.all(head.reg_offsets.data > 0))

    def test_wrong_crop_size(self):
        with self.assertRaises(DimensionError):
            model.backbone_forward(self.params, Tensor(np.zeros((3, 100, 100))))

    def test_dr_split_shapes(self):
        features = model.backbone_forward(self.params, self.template)
        self.assertEqual(features.shape, (6, 2, 2))
        unrelated, related = model.dr_split(self.params, features)
        self.assertEqual(unrelated.shape, (6, 2, 2))
        self.assertEqual(related.shape, (6, 2, 2))

    def test_zero_template_couples_to_zero(self):
        related_x = model.identity_features(self.params, model.backbone_forward(self.params, self.search))
        coupled = model.couple(self.params, Tensor(np.zeros((6, 2, 2))), related_x, 'cls')
        self.assertEqual(coupled.shape, (6, 9, 9))
        self.assertFalse(np.any(coupled.data))

    def test_correlation_is_averaged_over_kernel(self):
        rng = np.random.default_rng(2)
        kernel, search = Tensor(rng.normal(size=(6, 2, 2))), Tensor(rng.normal(size=(6, 10, 10)))
        np.testing.assert_allclose(model.correlate(kernel, search).data,
                                   core.depthwise_xcorr(kernel, search).data / 4.0, rtol=1e-12)

    def test_regression_offsets_stay_bounded(self):
        stride = self.params.spec.total_stride
        for scale in (-1e6, 1e6):
            self.params['head_reg.1.bias'].data[:] = scale
            offsets = model.pair_forward(self.params, self.template, self.search).reg_offsets.data
            self.assertTrue(np.all(np.isfinite(offsets)))
            self.assertTrue(np.all(offsets >= stride * np.exp(-model.REG_LOG_LIMIT) * (1 - 1e-12)))
            self.assertTrue(np.all(offsets <= stride * np.exp(model.REG_LOG_LIMIT) * (1 + 1e-12)))

    def test_unknown_task(self):
        with self.assertRaises(ValueError):
            model.couple(self.params, Tensor(np.zeros((6, 2, 2))), Tensor(np.zeros((6, 10, 10))), 'mask')

    def test_discriminator_scores(self):
        features = model.backbone_forward(self.params, self.template)
        unrelated, related = model.dr_split(self.params, features)
        disentangled = core.concat_channels(related, unrelated)
        self.assertEqual(model.global_score(self.params, features, disentangled).shape, ())
        self.assertEqual(model.local_scores(self.params, features, disentangled).shape, (1, 2, 2))

    def test_baseline_reads_backbone_features(self):
        params = tiny_model(use_dr=False)
        self.assertFalse(params.has_block('dr_related'))
        self.assertFalse(params.has_block('disc_global'))
        features = model.backbone_forward(params, self.template)
        self.assertIs(model.identity_features(params, features), features)
        head = model.pair_forward(params, self.template, self.search)
        self.assertEqual(head.cls_logits.shape, (1, 9, 9))
