"""Adamax and Adam optimizers over named parameter dictionaries."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


class NonFiniteGradientError(FloatingPointError):
    """A gradient contained inf/nan; the update was not applied."""


class Adamax:
    """Adam variant with an infinity-norm second moment.

    m <- b1 m + (1 - b1) g;  u <- max(b2 u, |g|)
    theta <- theta - lr/(1 - b1^t) * m / (u + eps)
    """

    name = "adamax"

    def __init__(self, params: dict[str, Tensor], lr=0.01, beta1=0.9, beta2=0.999, eps=1e-8):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.u = {k: np.zeros_like(p.data) for k, p in params.items()}

    def _check(self, grads):
        for name, g in grads.items():
            if g.shape != self.params[name].data.shape:
                raise ValueError(f"gradient shape {g.shape} mismatches {name}")
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradientError(f"non-finite gradient for {name}")

    def step(self, grads: dict[str, np.ndarray]):
        self._check(grads)
        self.t += 1
        correction = 1.0 - self.beta1**self.t
        for name, g in grads.items():
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.u[name] = np.maximum(self.beta2 * self.u[name], np.abs(g))
            p = self.params[name]
            p.data = p.data - (self.lr / correction) * self.m[name] / (self.u[name] + self.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"optim/t": np.array([float(self.t)])}
        for name in self.params:
            out[f"optim/m/{name}"] = self.m[name]
            out[f"optim/u/{name}"] = self.u[name]
        return out

    def load_state(self, arrays: dict[str, np.ndarray]):
        self.t = int(arrays["optim/t"][0])
        for name in self.params:
            self.m[name] = arrays[f"optim/m/{name}"].copy()
            self.u[name] = arrays[f"optim/u/{name}"].copy()


class Adam(Adamax):
    """Standard Adam; second moment is an elementwise mean square."""

    name = "adam"

    def step(self, grads: dict[str, np.ndarray]):
        self._check(grads)
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, g in grads.items():
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.u[name] = self.beta2 * self.u[name] + (1.0 - self.beta2) * g * g
            p = self.params[name]
            p.data = p.data - self.lr * (self.m[name] / c1) / (np.sqrt(self.u[name] / c2) + self.eps)


def make_optimizer(kind: str, params, lr) -> Adamax:
    if kind == "adamax":
        return Adamax(params, lr=lr)
    if kind == "adam":
        return Adam(params, lr=lr)
    raise ValueError(f"unknown optimizer {kind!r}")


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale gradients in place to the norm ceiling; returns the pre-clip norm."""
    norm = global_norm(grads)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm
