"""SGD (with optional momentum) and Adam over :class:`ModelParams`."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .models import Gradients, ModelParams


@dataclass(frozen=True)
class OptimizerConfig:
    name: str = "sgd"
    momentum: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.name not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.name!r}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0 and self.eps > 0):
            raise ValueError("invalid Adam hyperparameters")


class SGD:
    def __init__(self, lr: float, momentum: float = 0.0):
        self.lr = lr
        self.momentum = momentum
        self._velocity: list[np.ndarray] | None = None

    def step(self, params: ModelParams, grads: Gradients) -> ModelParams:
        if self.momentum == 0.0:
            return ModelParams.from_arrays(
                params.spec, [p - self.lr * g for p, g in zip(params.arrays(), grads.arrays())])
        if self._velocity is None:
            self._velocity = [np.zeros_like(p) for p in params.arrays()]
        out = []
        for k, (p, g) in enumerate(zip(params.arrays(), grads.arrays())):
            self._velocity[k] = self.momentum * self._velocity[k] + g
            out.append(p - self.lr * self._velocity[k])
        return ModelParams.from_arrays(params.spec, out)


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self._m: list[np.ndarray] | None = None
        self._v: list[np.ndarray] | None = None

    def step(self, params: ModelParams, grads: Gradients) -> ModelParams:
        if self._m is None:
            self._m = [np.zeros_like(p) for p in params.arrays()]
            self._v = [np.zeros_like(p) for p in params.arrays()]
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        out = []
        for k, (p, g) in enumerate(zip(params.arrays(), grads.arrays())):
            self._m[k] = self.beta1 * self._m[k] + (1.0 - self.beta1) * g
            self._v[k] = self.beta2 * self._v[k] + (1.0 - self.beta2) * g * g
            out.append(p - self.lr * (self._m[k] / c1) / (np.sqrt(self._v[k] / c2) + self.eps))
        return ModelParams.from_arrays(params.spec, out)


def make_optimizer(cfg: OptimizerConfig, lr: float):
    if cfg.name == "sgd":
        return SGD(lr, cfg.momentum)
    return Adam(lr, cfg.beta1, cfg.beta2, cfg.eps)
