"""
Finite-difference verification of the analytic gradients produced by drmim.core.
"""

import logging

import numpy as np

from drmim import core
from drmim.core import Tensor

LOG = logging.getLogger(__name__)

DEFAULT_EPS = 1e-5
DEFAULT_TOLERANCE = 1e-4


def _projected_loss(fn, inputs, projection):
    out = fn(*inputs)
    if projection is None:
        return out
    return core.sum_all(core.mul(out, Tensor(projection)))


def numerical_gradient(fn, inputs, index, projection=None, eps=DEFAULT_EPS):
    """
    Central differences of the (projected) scalar output of ``fn`` w.r.t. ``inputs[index]``.
    """
    target = inputs[index]
    grad = np.zeros_like(target.data)
    flat = target.data.reshape(-1)
    flat_grad = grad.reshape(-1)
    with core.no_grad():
        for position in range(flat.size):
            original = flat[position]
            flat[position] = original + eps
            upper = _projected_loss(fn, inputs, projection).item()
            flat[position] = original - eps
            lower = _projected_loss(fn, inputs, projection).item()
            flat[position] = original
            flat_grad[position] = (upper - lower) / (2.0 * eps)
    return grad


def relative_error(analytic, numeric):
    scale = max(float(np.max(np.abs(analytic))), float(np.max(np.abs(numeric))), 1e-8)
    return float(np.max(np.abs(analytic - numeric))) / scale


def gradcheck(fn, inputs, eps=DEFAULT_EPS, seed=0):
    """
    Compare analytic and numeric gradients of ``fn`` at ``inputs``.

    Non-scalar outputs are reduced with a fixed random projection so every
    output element contributes. Returns the worst relative error over inputs.
    """
    inputs = [tensor if isinstance(tensor, Tensor) else Tensor(tensor) for tensor in inputs]
    for tensor in inputs:
        tensor.requires_grad = True
        tensor.zero_grad()
    with core.no_grad():
        sample_output = fn(*inputs)
    projection = None
    if sample_output.size != 1:
        projection = np.random.default_rng(seed).normal(size=sample_output.shape)

    loss = _projected_loss(fn, inputs, projection)
    core.backward(loss)

    worst = 0.0
    for index, tensor in enumerate(inputs):
        analytic = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
        numeric = numerical_gradient(fn, inputs, index, projection=projection, eps=eps)
        error = relative_error(analytic, numeric)
        LOG.debug("input %d %s: relative error %.3e", index, list(tensor.shape), error)
        worst = max(worst, error)
    return worst
