"""Adam optimizer with decoupled weight decay."""

from __future__ import annotations

import numpy as np

from .errors import NonFiniteError


class Adam:
    """Adam over a name -> Tensor parameter mapping.

    Defaults follow the training recipe used throughout the package:
    beta1=0.95, beta2=0.99, lr=1e-3, eps=1e-8.  Weight decay is decoupled
    from the gradient moments and applied after the adaptive step, scaled
    by the learning rate.  Parameters are updated in mapping order, which
    keeps repeated runs bit-identical.
    """

    def __init__(self, params, lr=1e-3, beta1=0.95, beta2=0.99, eps=1e-8,
                 weight_decay=1e-4):
        if not 0.0 < lr or not np.isfinite(lr):
            if lr != 0.0:
                raise ValueError(f"lr must be finite and >= 0, got {lr}")
        if not 0.0 <= beta1 < 1.0:
            raise ValueError(f"beta1 must be in [0, 1), got {beta1}")
        if not 0.0 <= beta2 < 1.0:
            raise ValueError(f"beta2 must be in [0, 1), got {beta2}")
        if weight_decay < 0.0:
            raise ValueError(f"weight_decay must be >= 0, got {weight_decay}")
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self._v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def step(self):
        """Apply one update.  Missing gradients count as zero.

        If any gradient contains a non-finite value, no parameter is
        touched and NonFiniteError is raised.
        """
        for name, p in self.params.items():
            if p.grad is not None and not np.isfinite(p.grad).all():
                raise NonFiniteError(f"non-finite gradient in parameter {name!r}")
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data -= self.lr * update
            if self.weight_decay:
                p.data -= self.lr * self.weight_decay * p.data

    def state_summary(self):
        return {"t": self.t, "lr": self.lr, "beta1": self.beta1,
                "beta2": self.beta2, "weight_decay": self.weight_decay}
