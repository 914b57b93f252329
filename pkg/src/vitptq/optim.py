"""Adam over tape gradients."""

import numpy as np


class Adam:
    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self._m = [np.zeros(p.shape) for p in self.params]
        self._v = [np.zeros(p.shape) for p in self.params]

    def step(self, grads):
        """Apply one update from a gradient table; parameters without a gradient are skipped."""
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for i, p in enumerate(self.params):
            g = grads.array(p)
            if g is None:
                continue
            m = self._m[i] = self.b1 * self._m[i] + (1 - self.b1) * g
            v = self._v[i] = self.b2 * self._v[i] + (1 - self.b2) * g * g
            p.assign(p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps))
