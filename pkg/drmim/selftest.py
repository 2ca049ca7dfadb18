"""
Built-in verification suite: gradient checks, estimator identities,
correlation and parameter-count oracles, and the loss-assembly identity.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np

from drmim import core, gradcheck, loss, model
from drmim.core import Tensor
from drmim.utils import GRADCHECK_SEEDS

LOG = logging.getLogger(__name__)

GRADIENT_TOLERANCE = 1e-4
ORACLE_TOLERANCE = 1e-12
MI_ORDERING_CORRELATIONS = (0.0, 0.5, 0.9)
MI_ORDERING_SEEDS = (0, 1, 2)


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


def _positive(rng, shape):
    return rng.uniform(0.5, 2.0, size=shape)


def _away_from_zero(rng, shape):
    values = rng.normal(size=shape)
    return values + np.sign(values) * 0.1


def gradient_cases():
    """
    (name, builder) pairs; ``builder(rng)`` returns (fn, inputs) for one random instance.
    """
    def conv(stride, pad):
        def build(rng):
            return (lambda x, w, b: core.conv2d(x, w, b, stride, pad),
                    [rng.normal(size=(2, 5, 5)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)])
        return build

    def minimum(rng):
        values = rng.normal(size=(3, 4))
        limit = values + np.where(rng.random(size=(3, 4)) < 0.5, -0.3, 0.3)
        return (lambda x: core.minimum(x, limit), [values])

    def clip(rng):
        magnitudes = np.where(rng.random(size=(3, 4)) < 0.5, rng.uniform(0.0, 0.6, size=(3, 4)),
                              rng.uniform(1.0, 2.0, size=(3, 4)))
        return (lambda x: core.clip(x, -0.8, 0.8), [magnitudes * rng.choice([-1.0, 1.0], size=(3, 4))])

    return [
        ('add', lambda rng: (core.add, [rng.normal(size=(2, 3)), rng.normal(size=(2, 3))])),
        ('sub', lambda rng: (core.sub, [rng.normal(size=(2, 3)), rng.normal(size=(2, 3))])),
        ('mul', lambda rng: (core.mul, [rng.normal(size=(2, 3)), rng.normal(size=(2, 3))])),
        ('scalar_mul', lambda rng: (lambda x: core.scalar_mul(x, -1.7), [rng.normal(size=(4,))])),
        ('relu', lambda rng: (core.relu, [_away_from_zero(rng, (3, 4))])),
        ('sigmoid', lambda rng: (core.sigmoid, [rng.normal(scale=3.0, size=(3, 4))])),
        ('softplus', lambda rng: (core.softplus, [rng.normal(scale=20.0, size=(3, 4))])),
        ('exp', lambda rng: (core.exp, [rng.normal(size=(3, 4))])),
        ('log', lambda rng: (core.log, [_positive(rng, (3, 4))])),
        ('sum', lambda rng: (core.sum_all, [rng.normal(size=(2, 3, 2))])),
        ('mean', lambda rng: (core.mean_all, [rng.normal(size=(2, 3, 2))])),
        ('concat_channels', lambda rng: (core.concat_channels, [rng.normal(size=(2, 3, 3)),
                                                                rng.normal(size=(1, 3, 3))])),
        ('squared_l2', lambda rng: (core.squared_l2, [rng.normal(size=(2, 3, 3))])),
        ('reshape', lambda rng: (lambda x: core.reshape(x, (6, 2)), [rng.normal(size=(3, 4))])),
        ('minimum', minimum),
        ('clip', clip),
        ('spatial_mean', lambda rng: (core.spatial_mean, [rng.normal(size=(2, 3, 4))])),
        ('tile_spatial', lambda rng: (lambda x: core.tile_spatial(x, 3, 2), [rng.normal(size=(2, 1, 1))])),
        ('stack', lambda rng: (lambda a, b: core.stack([a, b]), [rng.normal(size=()), rng.normal(size=(1,))])),
        ('channel', lambda rng: (lambda x: core.channel(x, 1), [rng.normal(size=(3, 2, 2))])),
        ('conv2d', conv(1, 0)),
        ('conv2d_strided_padded', conv(2, 1)),
        ('depthwise_xcorr', lambda rng: (core.depthwise_xcorr, [rng.normal(size=(2, 2, 3)),
                                                                rng.normal(size=(2, 5, 6))])),
    ]


def check_gradients(seeds=GRADCHECK_SEEDS):
    worst_by_op = {}
    for name, build in gradient_cases():
        worst = 0.0
        for seed in range(seeds):
            fn, inputs = build(np.random.default_rng(seed))
            worst = max(worst, gradcheck.gradcheck(fn, [Tensor(value) for value in inputs], seed=seed))
        worst_by_op[name] = worst
    failing = {name: error for name, error in worst_by_op.items() if not error < GRADIENT_TOLERANCE}
    worst_name = max(worst_by_op, key=worst_by_op.get)
    detail = f"{len(worst_by_op)} ops x {seeds} seeds, worst {worst_name} {worst_by_op[worst_name]:.2e}"
    if failing:
        detail += f"; failing {sorted(failing)}"
    return CheckResult('gradients', not failing, detail)


def check_jsd_identities(configurations=1000, seed=0):
    rng = np.random.default_rng(seed)
    worst = -math.inf
    for _ in range(configurations):
        size_joint, size_marginal = rng.integers(1, 9, size=2)
        scale = rng.choice([0.1, 1.0, 10.0, 100.0])
        joint = Tensor(rng.normal(scale=scale, size=size_joint))
        marginal = Tensor(rng.normal(scale=scale, size=size_marginal))
        worst = max(worst, loss.jsd_mi(joint, marginal).item())
    at_zero = loss.jsd_mi(Tensor(np.zeros(4)), Tensor(np.zeros(4))).item()
    saturated = loss.jsd_mi(Tensor(np.full(4, 50.0)), Tensor(np.full(4, -50.0))).item()
    passed = (worst <= 0.0 and abs(at_zero + 2.0 * math.log(2.0)) < ORACLE_TOLERANCE
              and abs(saturated) < ORACLE_TOLERANCE)
    return CheckResult(
        'jsd_identities', passed,
        f"max over {configurations} configs {worst:.3e}, zero scores {at_zero:.12f}, saturated {saturated:.2e}"
    )


def naive_xcorr(template, search):
    channels, t_h, t_w = template.shape
    _, s_h, s_w = search.shape
    out = np.zeros((channels, s_h - t_h + 1, s_w - t_w + 1))
    for c in range(channels):
        for i in range(s_h - t_h + 1):
            for j in range(s_w - t_w + 1):
                total = 0.0
                for a in range(t_h):
                    for b in range(t_w):
                        total += template[c, a, b] * search[c, i + a, j + b]
                out[c, i, j] = total
    return out


def check_xcorr_oracle(instances=100, seed=0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        channels = int(rng.integers(1, 4))
        t_h, t_w = (int(value) for value in rng.integers(1, 5, size=2))
        s_h, s_w = t_h + int(rng.integers(0, 6)), t_w + int(rng.integers(0, 6))
        template = rng.normal(size=(channels, t_h, t_w))
        search = rng.normal(size=(channels, s_h, s_w))
        ours = core.depthwise_xcorr(Tensor(template), Tensor(search)).data
        worst = max(worst, float(np.max(np.abs(ours - naive_xcorr(template, search)))))
    return CheckResult('xcorr_oracle', worst <= ORACLE_TOLERANCE, f"{instances} shapes, max deviation {worst:.2e}")


def oracle_parameter_count(spec, mu):
    """
    Independent count: C_out * C_in * k^2 + C_out summed over the network's convolutions.
    """
    def width(channels):
        return int(math.floor(channels * (1.0 - mu) + 0.5))

    total = 0
    previous = spec.in_channels
    for channels, kernel in zip(spec.backbone_widths, spec.backbone_kernels):
        total += width(channels) * previous * kernel ** 2 + width(channels)
        previous = width(channels)
    if spec.use_dr:
        dr = width(spec.dr_width)
        total += 2 * (dr * previous * 9 + dr + dr * dr + dr)
        previous = dr
    neck = width(spec.neck_width)
    total += 4 * (neck * previous * spec.neck_kernel ** 2 + neck)
    head = width(spec.head_width)
    k2 = spec.head_kernel ** 2
    for outputs in (1, 1, 4):
        tower = head * neck * k2 + head + (spec.head_depth - 1) * (head * head * k2 + head)
        total += tower + outputs * head * k2 + outputs
    return total


def check_pruning_accounting(spec=None, ratios=(0.0, 0.2, 0.5, 0.8)):
    spec = spec if spec is not None else model.ArchitectureSpec.default()
    counts = {mu: model.parameter_count(spec, model.PruneConfig(mu)) for mu in ratios}
    mismatched = [mu for mu, count in counts.items() if count != oracle_parameter_count(spec, mu)]
    ratio = model.parameter_count(spec, model.PruneConfig(0.5)) / model.parameter_count(spec)
    passed = not mismatched and ratio < 0.4
    return CheckResult('pruning_accounting', passed,
                       f"counts {counts}, mu=0.5 keeps {ratio:.3f} of mu=0, oracle mismatches {mismatched}")


def tiny_spec(**overrides):
    values = dict(
        template_size=64, search_size=128, backbone_widths=(4, 6, 8, 8, 6), dr_width=6, neck_width=6,
        neck_kernel=1, head_width=6, head_depth=1, disc_width=8,
    )
    values.update(overrides)
    return model.ArchitectureSpec(**values)


def random_head(rng, size):
    return model.HeadOutputs(
        cls_logits=Tensor(rng.normal(size=(1, size, size))),
        quality_logits=Tensor(rng.normal(size=(1, size, size))),
        reg_offsets=Tensor(np.exp(rng.normal(size=(4, size, size))) * 8.0),
    )


def check_loss_assembly(seed=0):
    rng = np.random.default_rng(seed)
    spec = tiny_spec()
    grid = loss.ScoreGrid.from_spec(spec)
    targets = loss.assign_targets(grid, (40.5, 40.5, 48.0, 40.0))
    weights = loss.LossWeights(rho=0.0, gamma=0.0, omega=0.0)
    cr = loss.cr_loss(random_head(rng, spec.score_size), targets, weights)
    mi = core.add(core.scalar_mul(Tensor(rng.normal()), 0.0), core.scalar_mul(Tensor(rng.normal()), 0.0))
    idsim = loss.idsim_loss(Tensor(rng.normal(size=(2, 2, 2))), Tensor(rng.normal(size=(2, 2, 2))), 0.0)
    total = loss.total_loss(cr, mi, idsim)
    identical = total.data.tobytes() == cr.data.tobytes()
    return CheckResult('loss_assembly', identical, f"total {total.item()!r} vs cr {cr.item()!r}")


def check_mi_ordering(seeds=MI_ORDERING_SEEDS, correlations=MI_ORDERING_CORRELATIONS):
    orders = []
    for seed in seeds:
        estimates = [loss.estimate_gaussian_mi(correlation, seed=seed) for correlation in correlations]
        orders.append(estimates)
    passed = all(all(a < b for a, b in zip(row, row[1:])) for row in orders)
    detail = '; '.join(
        f"seed {seed}: " + ', '.join(f"{value:.4f}" for value in row) for seed, row in zip(seeds, orders)
    )
    return CheckResult('mi_ordering', passed, detail)


def run_selftest(with_mi_ordering=False, gradient_seeds=GRADCHECK_SEEDS):
    checks = [
        lambda: check_gradients(gradient_seeds),
        check_jsd_identities,
        check_xcorr_oracle,
        check_pruning_accounting,
        check_loss_assembly,
    ]
    if with_mi_ordering:
        checks.append(check_mi_ordering)
    results = []
    for check in checks:
        result = check()
        LOG.log(logging.INFO if result.passed else logging.ERROR, "%s %s: %s",
                'PASS' if result.passed else 'FAIL', result.name, result.detail)
        results.append(result)
    return results
