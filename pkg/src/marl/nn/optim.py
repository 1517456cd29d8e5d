"""Adam optimizer with per-parameter first/second moment state."""

from __future__ import annotations

import numpy as np

from ..errors import StateError, TrainingDivergedError
from .autodiff import Parameter


class Adam:
    def __init__(self, params: list[Parameter], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self, epoch: int | None = None) -> None:
        """Apply one update from the accumulated gradients.

        Raises TrainingDivergedError on any non-finite gradient; the optional
        epoch index is attached for diagnostics.
        """
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                raise StateError(f"parameter {p.name}: step before backward")
            if not np.all(np.isfinite(g)):
                raise TrainingDivergedError(f"non-finite gradient in {p.name}", epoch=epoch)
            m = self._m[i]
            v = self._v[i]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            update = (self.lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)
            p.data = p.data - update.astype(p.data.dtype)
