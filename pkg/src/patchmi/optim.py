"""In-place parameter updates: Adam and SGD with momentum/weight decay."""

import numpy as np

from .autodiff import DivergenceError


class Optimizer:
    def __init__(self, params):
        self.params = [p for p in params if p.requires_grad]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def _check_grads(self):
        for p in self.params:
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise DivergenceError("non-finite gradient encountered during optimizer step")


class Adam(Optimizer):
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        super().__init__(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self._check_grads()
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g
            mhat = self.m[i] / (1.0 - b1 ** self.t)
            vhat = self.v[i] / (1.0 - b2 ** self.t)
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)
        self.zero_grad()


class SGD(Optimizer):
    """v <- momentum * v + (g + wd * theta); theta <- theta - lr * v."""

    def __init__(self, params, lr, momentum=0.0, weight_decay=0.0):
        super().__init__(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self._check_grads()
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            if self.momentum:
                self.v[i] = self.momentum * self.v[i] + g
                g = self.v[i]
            p.data -= self.lr * g
        self.zero_grad()
