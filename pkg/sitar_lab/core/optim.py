"""First-order optimizers over lists of leaf tensors."""

from __future__ import annotations

import logging
from typing import Sequence

import numpy as np

from .tensor import Array, Tensor

logger = logging.getLogger(__name__)


class Optimizer:
    def __init__(self, params: Sequence[Tensor], lr: float) -> None:
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.params = list(params)
        self.lr = lr

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        raise NotImplementedError

    def state(self) -> dict[str, Array]:
        return {}

    def load_state(self, state: dict[str, Array]) -> None:
        pass


class SGD(Optimizer):
    def step(self) -> None:
        for p in self.params:
            if p.grad is not None:
                p.data = p.data - self.lr * p.grad


class Adam(Optimizer):
    """Adaptive moments with bias correction and no weight decay.

    Parameters whose gradient is missing or all zero are skipped and keep
    their moments, so a step with all-zero gradients leaves every parameter
    unchanged.
    """

    def __init__(
        self,
        params: Sequence[Tensor],
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ) -> None:
        super().__init__(params, lr)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for i, p in enumerate(self.params):
            if p.grad is None or not np.any(p.grad):
                continue
            g = p.grad
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            update = self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)
            p.data = p.data - update

    def state(self) -> dict[str, Array]:
        out: dict[str, Array] = {"adam.t": np.array([float(self.t)])}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"adam.m.{i}"] = m.copy()
            out[f"adam.v.{i}"] = v.copy()
        return out

    def load_state(self, state: dict[str, Array]) -> None:
        self.t = int(state["adam.t"][0])
        self.m = [state[f"adam.m.{i}"].copy() for i in range(len(self.params))]
        self.v = [state[f"adam.v.{i}"].copy() for i in range(len(self.params))]


def make_optimizer(kind: str, params: Sequence[Tensor], lr: float) -> Optimizer:
    if kind == "adam":
        return Adam(params, lr=lr)
    if kind == "sgd":
        return SGD(params, lr=lr)
    raise ValueError(f"unknown optimizer {kind!r}")
