import numpy as np


class SGD:
    """Classical momentum SGD: ``v <- m*v + g``, ``p <- p - lr*v``."""

    def __init__(self, params, lr, momentum=0.0):
        if lr <= 0:
            raise ValueError("lr must be positive")
        self.params = list(params)
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            sgd_step(p.data, p.grad, v, self.lr, self.momentum)


def sgd_step(param, grad, velocity, lr, momentum):
    """In-place update of ``param`` and ``velocity`` arrays."""
    if lr <= 0:
        raise ValueError("lr must be positive")
    if momentum:
        velocity *= momentum
        velocity += grad
        param -= lr * velocity
    else:
        param -= lr * grad
