"""
Stochastic gradient descent with momentum, L2 weight decay and global gradient-norm clipping.
"""

import logging

import numpy as np

LOG = logging.getLogger(__name__)


def clip_grad_norm(grads, max_norm):
    """
    Rescale ``grads`` together so their joint L2 norm is at most ``max_norm``.
    Returns (grads, norm before clipping).
    """
    norm = float(np.sqrt(sum(float(np.sum(grad * grad)) for grad in grads)))
    if max_norm and norm > max_norm:
        factor = max_norm / (norm + 1e-12)
        return [grad * factor for grad in grads], norm
    return grads, norm


class SGD:
    """
    g <- clip(grad); v <- momentum * v + (g + weight_decay * p);  p <- p - lr * v
    """

    def __init__(self, parameters, lr, momentum=0.9, weight_decay=0.0, max_grad_norm=None):
        self.parameters = list(parameters)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.max_grad_norm = max_grad_norm
        self.velocity = [np.zeros_like(parameter.data) for parameter in self.parameters]
        self.last_grad_norm = 0.0

    def zero_grad(self):
        for parameter in self.parameters:
            parameter.zero_grad()

    def step(self):
        grads = [
            parameter.grad if parameter.grad is not None else np.zeros_like(parameter.data)
            for parameter in self.parameters
        ]
        grads, self.last_grad_norm = clip_grad_norm(grads, self.max_grad_norm)
        if self.max_grad_norm and self.last_grad_norm > self.max_grad_norm:
            LOG.debug("Clipped gradient norm %.3f to %.3f", self.last_grad_norm, self.max_grad_norm)
        for parameter, velocity, grad in zip(self.parameters, self.velocity, grads):
            if self.weight_decay:
                grad = grad + self.weight_decay * parameter.data
            velocity *= self.momentum
            velocity += grad
            # Fresh array: recorded graphs may still reference the old values.
            parameter.data = parameter.data - self.lr * velocity
