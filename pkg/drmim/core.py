"""
Dense float64 tensors with reverse-mode automatic differentiation.

Every operation in this module returns a new Tensor. When at least one input
requires a gradient (and recording has not been switched off with ``no_grad``),
the output remembers its parents and a closure mapping the output adjoint to
one adjoint per parent. ``backward`` collects the operations that produced a
scalar loss into a Graph ordered by execution, then replays the closures in
reverse execution order, visiting each recorded operation exactly once.

A graph belongs to the thread that built it. Tensors that are not part of a
graph are plain immutable values and can be shared between threads.
"""

import itertools
import logging
import threading
from contextlib import contextmanager

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from drmim.exception import ContractError, DimensionError, DomainError

LOG = logging.getLogger(__name__)

# Above this magnitude softplus switches to its asymptotic form.
SOFTPLUS_THRESHOLD = 30.0

_SEQUENCE = itertools.count()
_STATE = threading.local()


def grad_enabled():
    return getattr(_STATE, 'enabled', True)


@contextmanager
def no_grad():
    """
    Context manager under which operations record nothing, whatever their inputs.
    """
    previous = grad_enabled()
    _STATE.enabled = False
    try:
        yield
    finally:
        _STATE.enabled = previous


class Tensor:
    """
    A float64 array that can take part in a differentiation graph.

    ``grad`` holds d(loss)/d(self) for the most recent ``backward`` this tensor
    took part in; it is assigned, never accumulated across calls.
    """

    __slots__ = ('data', 'requires_grad', 'grad', 'op', '_parents', '_backward', '_seq')

    def __init__(self, data, requires_grad=False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.op = None
        self._parents = ()
        self._backward = None
        self._seq = next(_SEQUENCE)

    @classmethod
    def _from_array(cls, array, requires_grad=False):
        tensor = cls.__new__(cls)
        tensor.data = array
        tensor.requires_grad = requires_grad
        tensor.grad = None
        tensor.op = None
        tensor._parents = ()
        tensor._backward = None
        tensor._seq = next(_SEQUENCE)
        return tensor

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def is_leaf(self):
        return self._backward is None

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float('nan')

    def numpy(self):
        return self.data.copy()

    def detach(self):
        return Tensor._from_array(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __add__(self, other):
        return add(self, as_tensor(other))

    def __radd__(self, other):
        return add(as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, as_tensor(other))

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(self, other)
        return mul(self, as_tensor(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __repr__(self):
        return f"Tensor(shape={list(self.shape)}, requires_grad={self.requires_grad}, op={self.op})"


def as_tensor(value):
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _record(array, parents, backward_fn, op):
    """
    Wrap an op result, attaching graph bookkeeping only when something upstream needs gradients.
    """
    requires = grad_enabled() and any(parent.requires_grad for parent in parents)
    out = Tensor._from_array(array, requires_grad=requires)
    if requires:
        out._parents = tuple(parents)
        out._backward = backward_fn
        out.op = op
    return out


def _require_same_shape(op_name, first, second):
    if first.shape != second.shape:
        raise DimensionError(op_name, f"shape mismatch {list(first.shape)} vs {list(second.shape)}")


class Graph:
    """
    Ordered record of the operations that produced ``output``.

    ``tensors`` lists every participating tensor that requires a gradient,
    sorted by creation (execution) order.
    """

    def __init__(self, output):
        seen = {}
        pending = [output]
        while pending:
            node = pending.pop()
            if id(node) in seen or not node.requires_grad:
                continue
            seen[id(node)] = node
            pending.extend(node._parents)
        self.output = output
        self.tensors = sorted(seen.values(), key=lambda tensor: tensor._seq)

    @property
    def operations(self):
        return [tensor for tensor in self.tensors if not tensor.is_leaf]

    @property
    def leaves(self):
        return [tensor for tensor in self.tensors if tensor.is_leaf]

    def replay(self, seed):
        """
        Propagate ``seed`` (the adjoint of the output) back through every recorded operation.
        """
        adjoints = {id(self.output): seed}
        for node in reversed(self.operations):
            adjoint = adjoints.get(id(node))
            if adjoint is None:
                adjoint = np.zeros_like(node.data)
            node.grad = adjoint
            for parent, parent_adjoint in zip(node._parents, node._backward(adjoint)):
                if parent_adjoint is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in adjoints:
                    adjoints[key] = adjoints[key] + parent_adjoint
                else:
                    adjoints[key] = parent_adjoint
        for leaf in self.leaves:
            leaf.grad = adjoints.get(id(leaf), np.zeros_like(leaf.data))


def backward(loss):
    """
    Populate ``grad`` on every tensor requiring a gradient that took part in computing ``loss``.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {list(loss.shape)}")
    if not loss.requires_grad:
        raise ContractError("backward called on a loss that is not attached to any graph")
    graph = Graph(loss)
    graph.replay(np.ones_like(loss.data))
    LOG.debug("Replayed %d operations over %d leaves", len(graph.operations), len(graph.leaves))
    return graph


# Elementwise and reduction operations.

def add(first, second):
    _require_same_shape('add', first, second)
    return _record(first.data + second.data, (first, second), lambda g: (g, g), 'add')


def sub(first, second):
    _require_same_shape('sub', first, second)
    return _record(first.data - second.data, (first, second), lambda g: (g, -g), 'sub')


def mul(first, second):
    _require_same_shape('mul', first, second)
    a, b = first.data, second.data
    return _record(a * b, (first, second), lambda g: (g * b, g * a), 'mul')


def scalar_mul(tensor, factor):
    factor = float(factor)
    return _record(tensor.data * factor, (tensor,), lambda g: (g * factor,), 'scalar_mul')


def relu(tensor):
    mask = tensor.data > 0
    return _record(tensor.data * mask, (tensor,), lambda g: (g * mask,), 'relu')


def _stable_sigmoid(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(tensor):
    out = _stable_sigmoid(tensor.data)
    return _record(out, (tensor,), lambda g: (g * out * (1.0 - out),), 'sigmoid')


def softplus(tensor):
    """
    log(1 + e^x), evaluated as x + log1p(e^-x) above the threshold so e^x never overflows.
    """
    x = tensor.data
    out = np.empty_like(x)
    high = x > SOFTPLUS_THRESHOLD
    out[high] = x[high] + np.log1p(np.exp(-x[high]))
    out[~high] = np.log1p(np.exp(x[~high]))
    slope = _stable_sigmoid(x)
    return _record(out, (tensor,), lambda g: (g * slope,), 'softplus')


def exp(tensor):
    out = np.exp(tensor.data)
    return _record(out, (tensor,), lambda g: (g * out,), 'exp')


def log(tensor):
    x = tensor.data
    if np.any(x <= 0):
        raise DomainError(f"log of non-positive input (min {float(np.min(x))!r})")
    return _record(np.log(x), (tensor,), lambda g: (g / x,), 'log')


def minimum(tensor, bound):
    """
    Elementwise min(tensor, bound) against a constant bound; ties pass the gradient to ``tensor``.
    """
    bound = bound.data if isinstance(bound, Tensor) else np.asarray(bound, dtype=np.float64)
    if bound.shape != tensor.shape:
        raise DimensionError('minimum', f"shape mismatch {list(tensor.shape)} vs {list(bound.shape)}")
    mask = tensor.data <= bound
    return _record(np.where(mask, tensor.data, bound), (tensor,), lambda g: (g * mask,), 'minimum')


def clip(tensor, low, high):
    """
    Elementwise clamp to [low, high]; the gradient passes only where the input lies strictly inside.
    """
    x = tensor.data
    inside = (x > low) & (x < high)
    return _record(np.clip(x, low, high), (tensor,), lambda g: (g * inside,), 'clip')


def sum_all(tensor):
    shape = tensor.shape
    return _record(np.array(tensor.data.sum()), (tensor,), lambda g: (np.full(shape, float(g)),), 'sum')


def mean_all(tensor):
    shape = tensor.shape
    count = tensor.size
    return _record(
        np.array(tensor.data.sum() / count), (tensor,), lambda g: (np.full(shape, float(g) / count),), 'mean'
    )


def squared_l2(tensor):
    x = tensor.data
    return _record(np.array(np.sum(x * x)), (tensor,), lambda g: (2.0 * float(g) * x,), 'squared_l2')


def reshape(tensor, shape):
    original = tensor.shape
    try:
        out = tensor.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError('reshape', str(exc)) from exc
    return _record(out, (tensor,), lambda g: (g.reshape(original),), 'reshape')


def concat(tensors, axis=0):
    tensors = list(tensors)
    if not tensors:
        raise ContractError("concat needs at least one tensor")
    reference = tensors[0].shape
    for tensor in tensors[1:]:
        if tensor.ndim != len(reference) or any(
                size != ref for dim, (size, ref) in enumerate(zip(tensor.shape, reference)) if dim != axis):
            raise DimensionError('concat', f"{list(tensor.shape)} incompatible with {list(reference)} off axis {axis}")
    splits = np.cumsum([tensor.shape[axis] for tensor in tensors])[:-1]
    out = np.concatenate([tensor.data for tensor in tensors], axis=axis)
    return _record(out, tensors, lambda g: tuple(np.split(g, splits, axis=axis)), 'concat')


def concat_channels(first, second):
    if first.ndim != 3 or second.ndim != 3:
        raise DimensionError('concat_channels', "expects [C,H,W] inputs")
    return concat([first, second], axis=0)


def stack(scalars):
    """
    Gather scalar (size-1) tensors into a vector.
    """
    scalars = list(scalars)
    for scalar in scalars:
        if scalar.size != 1:
            raise DimensionError('stack', f"expects size-1 tensors, got {list(scalar.shape)}")
    shapes = [scalar.shape for scalar in scalars]
    out = np.array([scalar.data.reshape(-1)[0] for scalar in scalars], dtype=np.float64)
    return _record(
        out, scalars, lambda g: tuple(np.full(shape, g[index]) for index, shape in enumerate(shapes)), 'stack'
    )


def channel(tensor, index):
    """
    [C,H,W] -> [H,W] slice of one channel.
    """
    if tensor.ndim != 3 or not 0 <= index < tensor.shape[0]:
        raise DimensionError('channel', f"no channel {index} in {list(tensor.shape)}")
    shape = tensor.shape

    def _backward(grad):
        full = np.zeros(shape)
        full[index] = grad
        return (full,)

    return _record(tensor.data[index].copy(), (tensor,), _backward, 'channel')


def spatial_mean(tensor):
    """
    [C,H,W] -> [C,1,1] average over the spatial sites.
    """
    if tensor.ndim != 3:
        raise DimensionError('spatial_mean', "expects a [C,H,W] input")
    channels, height, width = tensor.shape
    count = height * width
    out = tensor.data.sum(axis=(1, 2), keepdims=True) / count
    return _record(
        out, (tensor,), lambda g: (np.broadcast_to(g / count, (channels, height, width)).copy(),), 'spatial_mean'
    )


def tile_spatial(tensor, height, width):
    """
    [C,1,1] -> [C,H,W] by repetition.
    """
    if tensor.ndim != 3 or tensor.shape[1:] != (1, 1):
        raise DimensionError('tile_spatial', f"expects a [C,1,1] input, got {list(tensor.shape)}")
    out = np.broadcast_to(tensor.data, (tensor.shape[0], height, width)).copy()
    return _record(out, (tensor,), lambda g: (g.sum(axis=(1, 2), keepdims=True),), 'tile_spatial')


# Spatial operations.

def conv_output_size(size, kernel, stride, pad):
    return (size + 2 * pad - kernel) // stride + 1


def conv2d(inputs, weight, bias, stride=1, pad=0):
    """
    2-D convolution (cross-correlation, no kernel flip) of a [C_in,H,W] input by [C_out,C_in,k,k] weights.
    """
    if inputs.ndim != 3 or weight.ndim != 4:
        raise DimensionError('conv2d', "expects a [C,H,W] input and a [C_out,C_in,k,k] weight")
    out_channels, in_channels, kernel, kernel_w = weight.shape
    channels, height, width = inputs.shape
    if in_channels != channels:
        raise DimensionError('conv2d', f"weight expects {in_channels} input channels, input has {channels}")
    if kernel != kernel_w:
        raise DimensionError('conv2d', "only square kernels are supported")
    if bias.shape != (out_channels,):
        raise DimensionError('conv2d', f"bias shape {list(bias.shape)} does not match {out_channels} outputs")
    if stride < 1:
        raise ContractError(f"conv2d stride must be >= 1, got {stride}")
    if kernel > height + 2 * pad or kernel > width + 2 * pad:
        raise DimensionError('conv2d', f"kernel {kernel} larger than padded input {height}x{width} (pad {pad})")

    out_h = conv_output_size(height, kernel, stride, pad)
    out_w = conv_output_size(width, kernel, stride, pad)
    padded = np.pad(inputs.data, ((0, 0), (pad, pad), (pad, pad))) if pad else inputs.data
    windows = sliding_window_view(padded, (kernel, kernel), axis=(1, 2))[:, ::stride, ::stride][:, :out_h, :out_w]
    columns = windows.transpose(1, 2, 0, 3, 4).reshape(out_h * out_w, channels * kernel * kernel)
    flat_weight = weight.data.reshape(out_channels, -1)
    out = (columns @ flat_weight.T + bias.data).T.reshape(out_channels, out_h, out_w)

    def _backward(grad):
        grad_rows = grad.reshape(out_channels, -1)
        grad_weight = (grad_rows @ columns).reshape(weight.shape)
        grad_bias = grad_rows.sum(axis=1)
        grad_columns = (grad_rows.T @ flat_weight).reshape(out_h, out_w, channels, kernel, kernel)
        grad_columns = grad_columns.transpose(2, 0, 1, 3, 4)
        grad_padded = np.zeros(padded.shape)
        for row in range(kernel):
            for col in range(kernel):
                grad_padded[:, row:row + stride * (out_h - 1) + 1:stride,
                            col:col + stride * (out_w - 1) + 1:stride] += grad_columns[:, :, :, row, col]
        grad_inputs = grad_padded[:, pad:pad + height, pad:pad + width] if pad else grad_padded
        return grad_inputs, grad_weight, grad_bias

    return _record(out, (inputs, weight, bias), _backward, 'conv2d')


def depthwise_xcorr(template, search):
    """
    Per-channel cross-correlation of a [C,h,w] template over a [C,H,W] search map.
    """
    if template.ndim != 3 or search.ndim != 3:
        raise DimensionError('depthwise_xcorr', "expects [C,h,w] and [C,H,W] inputs")
    channels, t_h, t_w = template.shape
    s_channels, s_h, s_w = search.shape
    if channels != s_channels:
        raise DimensionError('depthwise_xcorr', f"channel mismatch {channels} vs {s_channels}")
    if t_h > s_h or t_w > s_w:
        raise DimensionError('depthwise_xcorr', f"template {t_h}x{t_w} larger than search {s_h}x{s_w}")

    out_h, out_w = s_h - t_h + 1, s_w - t_w + 1
    windows = sliding_window_view(search.data, (t_h, t_w), axis=(1, 2))
    kernel = template.data
    out = np.einsum('cijhw,chw->cij', windows, kernel)

    def _backward(grad):
        grad_template = np.einsum('cijhw,cij->chw', windows, grad)
        grad_search = np.zeros(search.shape)
        for row in range(t_h):
            for col in range(t_w):
                grad_search[:, row:row + out_h, col:col + out_w] += grad * kernel[:, row, col][:, None, None]
        return grad_template, grad_search

    return _record(out, (template, search), _backward, 'depthwise_xcorr')
