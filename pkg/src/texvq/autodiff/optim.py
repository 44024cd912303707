from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass(frozen=True)
class AdamHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


class Adam:
    """Adam over a named parameter dict.

    Parameters whose ``grad`` is None are treated as having a zero gradient.
    """

    def __init__(self, params: dict[str, Tensor], hyper: AdamHyper | None = None):
        self.params = dict(params)
        self.hyper = hyper or AdamHyper()
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        for name, p in self.params.items():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise NonFiniteGradientError(f"non-finite gradient in parameter {name!r}")
        h = self.hyper
        self.t += 1
        c1 = 1.0 - h.beta1**self.t
        c2 = 1.0 - h.beta2**self.t
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m, v = self.m[name], self.v[name]
            m *= h.beta1
            m += (1.0 - h.beta1) * g
            v *= h.beta2
            v += (1.0 - h.beta2) * (g * g)
            step = (h.lr / c1) * m / (np.sqrt(v / c2) + h.eps)
            p.data -= step.astype(p.data.dtype, copy=False)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: Adam) -> None:
    """Functional form: install ``grads`` then advance ``state`` one step."""
    for name, g in grads.items():
        params[name].grad = g
    state.step()
