"""
The Siamese network: shared backbone, disentangling encoders, task necks,
prediction heads and the two mutual-information discriminators.

Layer shapes are derived in one place (``plan_layers``) from an
ArchitectureSpec and a PruneConfig; building, counting, checkpoint validation
and the prune report all read from it.
"""

import hashlib
import json
import logging
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass

import numpy as np

from drmim import core
from drmim.core import Tensor
from drmim.exception import ConfigurationError, DimensionError

LOG = logging.getLogger(__name__)

MAX_PRUNING_RATIO = 0.9

# E1 produces identity-unrelated features, E2 identity-related ones.
DR_BLOCKS = ('dr_unrelated', 'dr_related')
NECK_BLOCKS = ('neck_cls_z', 'neck_cls_x', 'neck_reg_z', 'neck_reg_x')
HEAD_BLOCKS = (('head_cls', 1), ('head_quality', 1), ('head_reg', 4))
DISCRIMINATOR_BLOCKS = ('disc_global', 'disc_local')
TASKS = ('cls', 'reg')

# Final prediction convolutions start near zero.
HEAD_OUTPUT_INIT_STD = 0.01

# Raw regression outputs are clamped to +-REG_LOG_LIMIT before exp.
REG_LOG_LIMIT = 6.0


def pruned_width(channels, mu):
    """
    Scale a channel count by (1 - mu), rounding half up.
    """
    width = int(math.floor(channels * (1.0 - mu) + 0.5))
    if width < 1:
        raise ConfigurationError(f"Pruning ratio {mu} leaves {channels} channels with no width")
    return width


def conv_output_size(size, kernel, stride=1, pad=0):
    return core.conv_output_size(size, kernel, stride, pad)


@dataclass(frozen=True)
class PruneConfig:
    mu: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.mu <= MAX_PRUNING_RATIO:
            raise ConfigurationError(f"Pruning ratio must lie in [0, {MAX_PRUNING_RATIO}], got {self.mu}")


@dataclass(frozen=True)
class ConvLayer:
    """
    One convolution, optionally followed by a ReLU.
    """
    name: str
    block: str
    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    pad: int = 0
    relu: bool = True
    init_std: float = None

    @property
    def weight_shape(self):
        return (self.out_channels, self.in_channels, self.kernel, self.kernel)

    @property
    def bias_shape(self):
        return (self.out_channels,)

    @property
    def parameter_count(self):
        return self.out_channels * self.in_channels * self.kernel * self.kernel + self.out_channels


@dataclass(frozen=True)
class ArchitectureSpec:
    """
    Declarative description of the network before pruning.
    """
    template_size: int = 96
    search_size: int = 256
    in_channels: int = 3
    backbone_widths: tuple = (32, 64, 96, 96, 64)
    backbone_kernels: tuple = (5, 3, 3, 3, 3)
    backbone_strides: tuple = (2, 2, 2, 1, 1)
    dr_width: int = 64
    neck_width: int = 64
    neck_kernel: int = 3
    head_width: int = 64
    head_depth: int = 2
    head_kernel: int = 3
    disc_width: int = 64
    use_dr: bool = True

    def __post_init__(self):
        for name in ('backbone_widths', 'backbone_kernels', 'backbone_strides'):
            object.__setattr__(self, name, tuple(int(value) for value in getattr(self, name)))
        if not len(self.backbone_widths) == len(self.backbone_kernels) == len(self.backbone_strides):
            raise ConfigurationError("Backbone widths, kernels and strides must have the same length")
        if self.head_kernel % 2 != 1:
            raise ConfigurationError("Head kernels must be odd so towers preserve spatial size")
        if self.template_size >= self.search_size:
            raise ConfigurationError("Template crop must be smaller than the search crop")
        if self.neck_kernel > self.template_feature_size:
            raise ConfigurationError(
                f"Neck kernel {self.neck_kernel} exceeds the {self.template_feature_size}px template feature"
            )

    @classmethod
    def default(cls):
        return cls()

    def feature_size(self, input_size):
        """
        Spatial extent of the backbone output for a square input of ``input_size`` pixels.
        """
        size = input_size
        for kernel, stride in zip(self.backbone_kernels, self.backbone_strides):
            size = conv_output_size(size, kernel, stride)
            if size < 1:
                raise ConfigurationError(f"Backbone collapses a {input_size}px input to nothing")
        return size

    @property
    def template_feature_size(self):
        return self.feature_size(self.template_size)

    @property
    def search_feature_size(self):
        return self.feature_size(self.search_size)

    @property
    def score_size(self):
        return self.search_feature_size - self.template_feature_size + 1

    @property
    def total_stride(self):
        return int(np.prod(self.backbone_strides))

    @property
    def score_offset(self):
        """
        Search-crop pixel index of the receptive-field center of score-map cell (0, 0).
        """
        return (self.search_size - 1 - (self.score_size - 1) * self.total_stride) / 2.0

    def describe(self):
        description = asdict(self)
        description['backbone_widths'] = list(self.backbone_widths)
        description['backbone_kernels'] = list(self.backbone_kernels)
        description['backbone_strides'] = list(self.backbone_strides)
        return description


def plan_layers(spec, prune=None):
    """
    Every convolution of the network, in build order, with pruned channel counts.

    Network input channels and the channels of final prediction layers are
    never pruned.
    """
    mu = prune.mu if prune is not None else 0.0
    layers = []

    channels = spec.in_channels
    for index, (width, kernel, stride) in enumerate(
            zip(spec.backbone_widths, spec.backbone_kernels, spec.backbone_strides)):
        out_channels = pruned_width(width, mu)
        layers.append(ConvLayer(f'backbone.{index}', 'backbone', channels, out_channels, kernel, stride))
        channels = out_channels
    feature_channels = channels

    related_channels = feature_channels
    if spec.use_dr:
        dr_width = pruned_width(spec.dr_width, mu)
        for block in DR_BLOCKS:
            layers.append(ConvLayer(f'{block}.0', block, feature_channels, dr_width, 3, pad=1))
            layers.append(ConvLayer(f'{block}.1', block, dr_width, dr_width, 1, relu=False))
        related_channels = dr_width

    neck_width = pruned_width(spec.neck_width, mu)
    for block in NECK_BLOCKS:
        layers.append(ConvLayer(f'{block}.0', block, related_channels, neck_width, spec.neck_kernel, relu=False))

    head_width = pruned_width(spec.head_width, mu)
    pad = spec.head_kernel // 2
    for block, outputs in HEAD_BLOCKS:
        channels = neck_width
        for depth in range(spec.head_depth):
            layers.append(ConvLayer(f'{block}.{depth}', block, channels, head_width, spec.head_kernel, pad=pad))
            channels = head_width
        layers.append(ConvLayer(f'{block}.{spec.head_depth}', block, channels, outputs, spec.head_kernel, pad=pad,
                                relu=False, init_std=HEAD_OUTPUT_INIT_STD))

    if spec.use_dr:
        disc_width = pruned_width(spec.disc_width, mu)
        pair_channels = feature_channels + 2 * related_channels
        layers.append(ConvLayer('disc_global.0', 'disc_global', pair_channels, disc_width,
                                spec.template_feature_size))
        layers.append(ConvLayer('disc_global.1', 'disc_global', disc_width, 1, 1, relu=False))
        layers.append(ConvLayer('disc_local.0', 'disc_local', pair_channels, disc_width, 1))
        layers.append(ConvLayer('disc_local.1', 'disc_local', disc_width, 1, 1, relu=False))
    return layers


def layer_shapes(spec, prune=None):
    """
    Ordered map from parameter name to its shape.
    """
    shapes = OrderedDict()
    for layer in plan_layers(spec, prune):
        shapes[f'{layer.name}.weight'] = layer.weight_shape
        shapes[f'{layer.name}.bias'] = layer.bias_shape
    return shapes


def parameter_count(spec, prune=None, include_discriminators=False):
    """
    Number of learned scalars. The deployed tracker carries no discriminators,
    so they are excluded unless asked for.
    """
    return sum(
        layer.parameter_count for layer in plan_layers(spec, prune)
        if include_discriminators or layer.block not in DISCRIMINATOR_BLOCKS
    )


def spec_hash(spec, prune=None):
    mu = prune.mu if prune is not None else 0.0
    canonical = json.dumps({'spec': spec.describe(), 'mu': mu}, sort_keys=True, separators=(',', ':'))
    return hashlib.sha256(canonical.encode('utf-8')).digest()


class ModelParams:
    """
    Named weights of one network instance plus the metadata needed to rebuild it.
    """

    def __init__(self, spec, prune, seed, tensors, step=0):
        self.spec = spec
        self.prune = prune
        self.seed = seed
        self.step = step
        self.tensors = OrderedDict(tensors)
        self.layers = plan_layers(spec, prune)
        self._blocks = OrderedDict()
        for layer in self.layers:
            self._blocks.setdefault(layer.block, []).append(layer)

    def __getitem__(self, name):
        return self.tensors[name]

    def __contains__(self, name):
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    @property
    def mu(self):
        return self.prune.mu

    @property
    def spec_hash(self):
        return spec_hash(self.spec, self.prune)

    def block_layers(self, block):
        try:
            return self._blocks[block]
        except KeyError:
            raise DimensionError('model', f"network has no block named {block!r}") from None

    def has_block(self, block):
        return block in self._blocks

    def trainable(self):
        return list(self.tensors.values())

    def zero_grad(self):
        for tensor in self.tensors.values():
            tensor.zero_grad()

    def copy(self):
        tensors = OrderedDict(
            (name, Tensor(tensor.data, requires_grad=tensor.requires_grad)) for name, tensor in self.tensors.items()
        )
        return ModelParams(self.spec, self.prune, self.seed, tensors, step=self.step)

    def parameter_count(self, include_discriminators=False):
        return sum(
            tensor.size for name, tensor in self.tensors.items()
            if include_discriminators or name.split('.', 1)[0] not in DISCRIMINATOR_BLOCKS
        )


def build_model(spec, prune=None, seed=0):
    """
    Allocate and initialize every layer of the network.

    Weights are drawn from one seeded generator in build order: a zero-mean
    Gaussian with std sqrt(2 / fan_in), or the layer's fixed init std.
    Biases start at zero.
    """
    prune = prune if prune is not None else PruneConfig()
    rng = np.random.default_rng(seed)
    tensors = OrderedDict()
    for layer in plan_layers(spec, prune):
        fan_in = layer.in_channels * layer.kernel * layer.kernel
        std = layer.init_std if layer.init_std is not None else math.sqrt(2.0 / fan_in)
        tensors[f'{layer.name}.weight'] = Tensor(rng.normal(0.0, std, size=layer.weight_shape), requires_grad=True)
        tensors[f'{layer.name}.bias'] = Tensor(np.zeros(layer.bias_shape), requires_grad=True)
    params = ModelParams(spec, prune, seed, tensors)
    LOG.info(
        "Built model mu=%s seed=%s: %d network parameters, %d with discriminators",
        prune.mu, seed, params.parameter_count(), params.parameter_count(include_discriminators=True)
    )
    return params


@dataclass
class HeadOutputs:
    cls_logits: Tensor
    quality_logits: Tensor
    reg_offsets: Tensor


def run_block(params, block, inputs):
    out = inputs
    for layer in params.block_layers(block):
        out = core.conv2d(out, params[f'{layer.name}.weight'], params[f'{layer.name}.bias'], layer.stride, layer.pad)
        if layer.relu:
            out = core.relu(out)
    return out


def backbone_forward(params, crop):
    """
    Shared feature extractor for template and search crops.
    """
    spec = params.spec
    allowed = {(spec.in_channels, size, size) for size in (spec.template_size, spec.search_size)}
    if tuple(crop.shape) not in allowed:
        raise DimensionError(
            'backbone', f"crop shape {list(crop.shape)} is neither the template nor the search crop size"
        )
    return run_block(params, 'backbone', crop)


def dr_split(params, features):
    """
    Returns (identity-unrelated, identity-related) features.
    """
    return run_block(params, 'dr_unrelated', features), run_block(params, 'dr_related', features)


def identity_features(params, features):
    """
    The features that feed the tracking heads: E2 output, or the raw backbone
    output for a network built without the disentangling module.
    """
    if params.spec.use_dr:
        return run_block(params, 'dr_related', features)
    return features


def neck(params, task, branch, features):
    return run_block(params, f'neck_{task}_{branch}', features)


def correlate(kernel, search_features):
    """
    Depthwise cross-correlation averaged over the kernel window, so the
    coupled response does not grow with the template feature size.
    """
    _, height, width = kernel.shape
    return core.scalar_mul(core.depthwise_xcorr(kernel, search_features), 1.0 / (height * width))


def couple(params, related_z, related_x, task):
    if task not in TASKS:
        raise ValueError(f"Unknown task {task!r}")
    return correlate(neck(params, task, 'z', related_z), neck(params, task, 'x', related_x))


def head_forward(params, coupled_cls, coupled_reg):
    raw_reg = core.clip(run_block(params, 'head_reg', coupled_reg), -REG_LOG_LIMIT, REG_LOG_LIMIT)
    return HeadOutputs(
        cls_logits=run_block(params, 'head_cls', coupled_cls),
        quality_logits=run_block(params, 'head_quality', coupled_cls),
        reg_offsets=core.scalar_mul(core.exp(raw_reg), params.spec.total_stride),
    )


def pair_forward(params, template_crop, search_crop):
    """
    Full forward pass of one (Z, X) pair.
    """
    related_z = identity_features(params, backbone_forward(params, template_crop))
    related_x = identity_features(params, backbone_forward(params, search_crop))
    return head_forward(
        params,
        couple(params, related_z, related_x, 'cls'),
        couple(params, related_z, related_x, 'reg'),
    )


def global_score(params, features, disentangled):
    """
    Scalar score of a (f, f~) pair from the global discriminator.
    """
    return core.reshape(run_block(params, 'disc_global', core.concat_channels(features, disentangled)), ())


def local_scores(params, features, disentangled):
    """
    One score per spatial site of ``features`` paired with the spatial summary of ``disentangled``.
    """
    _, height, width = features.shape
    summary = core.tile_spatial(core.spatial_mean(disentangled), height, width)
    return run_block(params, 'disc_local', core.concat_channels(features, summary))
