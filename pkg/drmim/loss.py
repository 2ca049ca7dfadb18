"""
Training objectives: Jensen-Shannon mutual-information estimates, identity
similarity, anchor-free target assignment, classification/quality/IoU losses
and their assembly into the total loss.
"""

import logging
import math
from dataclasses import dataclass, replace
from functools import partial

import numpy as np

from drmim import core, model
from drmim.core import Tensor
from drmim.exception import ConfigurationError, ContractError, DomainError
from drmim.optim import SGD

LOG = logging.getLogger(__name__)

# Intersection and union are clamped to [IOU_EPS, 1 / IOU_EPS] before the logs.
IOU_EPS = 1e-12


@dataclass(frozen=True)
class LossWeights:
    rho: float = 0.05
    gamma: float = 0.05
    omega: float = 0.05
    lambda1: float = 1.0
    lambda2: float = 3.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0

    def __post_init__(self):
        for name, value in vars(self).items():
            if value < 0:
                raise ConfigurationError(f"Loss weight {name} must be non-negative, got {value}")

    def without_disentanglement(self):
        return replace(self, rho=0.0, gamma=0.0, omega=0.0)


@dataclass(frozen=True)
class MIDiscriminators:
    """
    ``global_scorer(f, f~)`` returns one score per pair;
    ``local_scorer(f, f~)`` returns a [1,H,W] map, one score per site of f.
    """
    global_scorer: object
    local_scorer: object

    @classmethod
    def for_params(cls, params):
        return cls(partial(model.global_score, params), partial(model.local_scores, params))


@dataclass
class TargetMaps:
    cls_labels: np.ndarray
    quality_targets: np.ndarray
    reg_targets: np.ndarray
    n_pos: int

    @property
    def positive(self):
        return self.cls_labels[0] > 0


@dataclass(frozen=True)
class ScoreGrid:
    """
    Maps score-map cells to continuous search-crop coordinates, the same frame
    boxes and CropTransform use: pixel index i covers [i, i + 1), so a cell
    whose receptive field is centered on pixel index p sits at p + 0.5.
    """
    size: int
    stride: int
    offset: float

    @classmethod
    def from_spec(cls, spec):
        return cls(spec.score_size, spec.total_stride, spec.score_offset)

    def coordinates(self):
        return self.offset + 0.5 + self.stride * np.arange(self.size, dtype=np.float64)


# Mutual information.

def jsd_mi(scores_joint, scores_marginal):
    """
    Jensen-Shannon lower bound: E_joint[-sp(-T)] - E_marginal[sp(T)].
    """
    if scores_joint.size == 0 or scores_marginal.size == 0:
        raise ContractError("jsd_mi needs non-empty joint and marginal scores")
    joint_term = core.mean_all(core.scalar_mul(core.softplus(core.scalar_mul(scores_joint, -1.0)), -1.0))
    marginal_term = core.mean_all(core.softplus(scores_marginal))
    return core.sub(joint_term, marginal_term)


def _derangement(batch_size):
    if batch_size < 2:
        raise ContractError(f"MI estimation needs a batch of at least 2 for negative pairs, got {batch_size}")
    return [(index + 1) % batch_size for index in range(batch_size)]


def global_mi(features, disentangled, discriminators):
    shift = _derangement(len(features))
    if len(disentangled) != len(features):
        raise ContractError("features and disentangled features must come in equal-length batches")
    joint = core.stack([discriminators.global_scorer(f, d) for f, d in zip(features, disentangled)])
    marginal = core.stack([discriminators.global_scorer(f, disentangled[j]) for f, j in zip(features, shift)])
    return jsd_mi(joint, marginal)


def local_mi(features, disentangled, discriminators):
    """
    Average over spatial sites of the per-site JSD estimate.
    """
    shift = _derangement(len(features))
    if len(disentangled) != len(features):
        raise ContractError("features and disentangled features must come in equal-length batches")
    joint = core.concat([
        core.reshape(discriminators.local_scorer(f, d), (-1,)) for f, d in zip(features, disentangled)
    ])
    marginal = core.concat([
        core.reshape(discriminators.local_scorer(f, disentangled[j]), (-1,)) for f, j in zip(features, shift)
    ])
    return jsd_mi(joint, marginal)


def mi_terms(features, disentangled, discriminators, weights):
    """
    Returns (L_MI, global estimate, local estimate).
    """
    global_estimate = global_mi(features, disentangled, discriminators)
    local_estimate = local_mi(features, disentangled, discriminators)
    weighted = core.add(
        core.scalar_mul(global_estimate, weights.rho),
        core.scalar_mul(local_estimate, weights.gamma),
    )
    return weighted, global_estimate, local_estimate


def mi_loss(features, disentangled, discriminators, weights):
    return mi_terms(features, disentangled, discriminators, weights)[0]


def idsim_loss(related_z, related_z_prime, omega):
    return core.scalar_mul(core.squared_l2(core.sub(related_z, related_z_prime)), omega)


def exact_mi_gaussian(correlation):
    """
    Mutual information (nats) of a bivariate Gaussian with the given correlation.
    """
    if not -1.0 < correlation < 1.0:
        raise DomainError(f"correlation must lie strictly inside (-1, 1), got {correlation}")
    return -0.5 * math.log(1.0 - correlation * correlation)


def _gaussian_pairs(rng, correlation, count):
    first = rng.standard_normal(count)
    second = correlation * first + math.sqrt(1.0 - correlation ** 2) * rng.standard_normal(count)
    return first, second


def _critic_scores(weights, first, second):
    pair = Tensor(np.stack([first, second])[:, None, :])
    hidden = core.relu(core.conv2d(pair, weights[0], weights[1]))
    return core.reshape(core.conv2d(hidden, weights[2], weights[3]), (-1,))


def _critic_bound(weights, first, second):
    joint = _critic_scores(weights, first, second)
    marginal = _critic_scores(weights, first, np.roll(second, -1))
    return jsd_mi(joint, marginal)


def estimate_gaussian_mi(correlation, seed=0, samples=512, held_out=4096, steps=400, hidden=32, lr=0.05):
    """
    Fit a small 1x1-conv critic by maximizing jsd_mi on correlated Gaussian
    pairs, then return its estimate on a fresh sample.
    """
    exact_mi_gaussian(correlation)
    rng = np.random.default_rng(seed)
    weights = [
        Tensor(rng.normal(0.0, math.sqrt(2.0 / 2), size=(hidden, 2, 1, 1)), requires_grad=True),
        Tensor(np.zeros(hidden), requires_grad=True),
        Tensor(rng.normal(0.0, math.sqrt(2.0 / hidden), size=(1, hidden, 1, 1)), requires_grad=True),
        Tensor(np.zeros(1), requires_grad=True),
    ]
    first, second = _gaussian_pairs(rng, correlation, samples)
    optimizer = SGD(weights, lr=lr, momentum=0.9)
    for _ in range(steps):
        optimizer.zero_grad()
        core.backward(core.scalar_mul(_critic_bound(weights, first, second), -1.0))
        optimizer.step()

    first, second = _gaussian_pairs(rng, correlation, held_out)
    with core.no_grad():
        estimate = _critic_bound(weights, first, second).item()
    LOG.debug("JSD estimate %.4f at correlation %.2f (exact MI %.4f)",
              estimate, correlation, exact_mi_gaussian(correlation))
    return estimate


# Target assignment and detection losses.

def assign_targets(grid, gt_box):
    """
    Label every score-map cell whose search-crop point lies strictly inside ``gt_box`` (x, y, w, h).
    """
    x, y, w, h = (float(value) for value in gt_box)
    coords = grid.coordinates()
    px = np.broadcast_to(coords[None, :], (grid.size, grid.size))
    py = np.broadcast_to(coords[:, None], (grid.size, grid.size))
    left, top, right, bottom = px - x, py - y, x + w - px, y + h - py
    positive = (left > 0) & (top > 0) & (right > 0) & (bottom > 0)

    reg = np.where(positive, np.stack([left, top, right, bottom]), 0.0)
    with np.errstate(divide='ignore', invalid='ignore'):
        centerness = np.sqrt(
            (np.minimum(left, right) / np.maximum(left, right)) * (np.minimum(top, bottom) / np.maximum(top, bottom))
        )
    quality = np.where(positive, centerness, 0.0)
    n_pos = int(positive.sum())
    if n_pos == 0:
        LOG.debug("No score-map cell falls inside box %s", gt_box)
    return TargetMaps(
        cls_labels=positive.astype(np.float64)[None],
        quality_targets=quality[None],
        reg_targets=reg,
        n_pos=n_pos,
    )


def focal_loss(cls_logits, labels, alpha=0.25, gamma=2.0):
    """
    Sigmoid focal loss summed over every location. (1-p)^g and p^g are
    evaluated as exp(-g * softplus(+-x)).
    """
    labels = Tensor(labels)
    negated = core.scalar_mul(cls_logits, -1.0)
    positive_term = core.scalar_mul(
        core.mul(core.exp(core.scalar_mul(core.softplus(cls_logits), -gamma)), core.softplus(negated)), alpha)
    negative_term = core.scalar_mul(
        core.mul(core.exp(core.scalar_mul(core.softplus(negated), -gamma)), core.softplus(cls_logits)), 1.0 - alpha)
    per_location = core.add(core.mul(positive_term, labels), core.mul(negative_term, Tensor(1.0 - labels.data)))
    return core.sum_all(per_location)


def _binary_entropy(target):
    with np.errstate(divide='ignore', invalid='ignore'):
        entropy = -(target * np.log(target) + (1.0 - target) * np.log(1.0 - target))
    return np.nan_to_num(entropy, nan=0.0)


def quality_bce(quality_logits, quality_targets, labels):
    """
    Binary cross entropy with logits at positive cells, less the target
    entropy so a perfect prediction scores zero.
    """
    bce = core.sub(core.softplus(quality_logits), core.mul(quality_logits, Tensor(quality_targets)))
    shifted = core.sub(bce, Tensor(_binary_entropy(quality_targets)))
    return core.sum_all(core.mul(shifted, Tensor(labels)))


def iou_loss(reg_offsets, reg_targets, labels):
    """
    -ln IoU between decoded and ground-truth boxes at positive cells.
    Both boxes share the cell's point, so IoU follows from the four distances.
    """
    mask = labels[0] > 0
    targets = np.where(mask[None], reg_targets, 1.0)
    left, top, right, bottom = (core.channel(reg_offsets, index) for index in range(4))
    target_left, target_top, target_right, target_bottom = targets

    predicted_area = core.mul(core.add(left, right), core.add(top, bottom))
    target_area = (target_left + target_right) * (target_top + target_bottom)
    overlap_w = core.add(core.minimum(left, target_left), core.minimum(right, target_right))
    overlap_h = core.add(core.minimum(top, target_top), core.minimum(bottom, target_bottom))
    intersection = core.mul(overlap_w, overlap_h)
    union = core.sub(core.add(predicted_area, Tensor(target_area)), intersection)
    intersection = core.clip(intersection, IOU_EPS, 1.0 / IOU_EPS)
    union = core.clip(union, IOU_EPS, 1.0 / IOU_EPS)
    per_location = core.sub(core.log(union), core.log(intersection))
    return core.sum_all(core.mul(per_location, Tensor(mask.astype(np.float64))))


def cr_loss(head, targets, weights):
    """
    Classification, quality and regression losses normalized by the positive count.
    """
    focal = focal_loss(head.cls_logits, targets.cls_labels, weights.focal_alpha, weights.focal_gamma)
    if targets.n_pos == 0:
        LOG.warning("Training pair has no positive cells; using the classification term alone")
        return focal
    quality = quality_bce(head.quality_logits, targets.quality_targets, targets.cls_labels)
    regression = iou_loss(head.reg_offsets, targets.reg_targets, targets.cls_labels)
    summed = core.add(
        core.add(focal, core.scalar_mul(quality, weights.lambda1)),
        core.scalar_mul(regression, weights.lambda2),
    )
    return core.scalar_mul(summed, 1.0 / targets.n_pos)


def total_loss(cr, mi, idsim):
    """
    L = L_CR - L_MI + L_Idsim; the MI term is subtracted so minimizing L maximizes it.
    """
    return core.add(core.sub(core.as_tensor(cr), core.as_tensor(mi)), core.as_tensor(idsim))


def box_iou(first, second):
    """
    IoU of corner boxes (x0, y0, x1, y1); broadcasts over leading axes.
    """
    first = np.asarray(first, dtype=np.float64)
    second = np.asarray(second, dtype=np.float64)
    overlap_w = np.clip(np.minimum(first[..., 2], second[..., 2]) - np.maximum(first[..., 0], second[..., 0]), 0, None)
    overlap_h = np.clip(np.minimum(first[..., 3], second[..., 3]) - np.maximum(first[..., 1], second[..., 1]), 0, None)
    intersection = overlap_w * overlap_h
    area_first = (first[..., 2] - first[..., 0]) * (first[..., 3] - first[..., 1])
    area_second = (second[..., 2] - second[..., 0]) * (second[..., 3] - second[..., 1])
    union = area_first + area_second - intersection
    with np.errstate(divide='ignore', invalid='ignore'):
        return np.where(union > 0, intersection / union, 0.0)
