"""Bias-corrected Adam over a ParamStore."""

from __future__ import annotations

import numpy as np

from .autodiff import ParamStore


class Adam:
    """Standard Adam; moment buffers persist for the optimizer's lifetime.

    Each training run owns a fresh instance, so repeats never share
    moments. With a constant gradient the bias-corrected update magnitude
    approaches the learning rate.
    """

    def __init__(
        self,
        store: ParamStore,
        learning_rate: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        if learning_rate <= 0.0:
            raise ValueError("learning rate must be positive")
        self.store = store
        self.learning_rate = float(learning_rate)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self._m = {name: np.zeros_like(p.value) for name, p in store.items()}
        self._v = {name: np.zeros_like(p.value) for name, p in store.items()}

    def step(self) -> None:
        """Apply one update in place from the accumulated gradients."""
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, p in self.store.items():
            g = p.grad
            if g is None:
                continue
            if not np.isfinite(g).all():
                raise FloatingPointError(
                    f"non-finite gradient in {name!r} at step {self.t}; "
                    "training diverged (consider a smaller learning rate)"
                )
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.value -= self.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
