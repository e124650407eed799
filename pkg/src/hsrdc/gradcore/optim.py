"""SGD-momentum and Adam over lists of leaf tensors, with optional global-norm clipping."""
from __future__ import annotations

from typing import Iterable, List, Optional

import numpy as np

from ..errors import ContractError, NumericalFailure
from .tensor import Tensor


class Optimizer:
    kind = "base"

    def __init__(self, params: Iterable[Tensor], lr: float, weight_decay: float = 0.0,
                 clip_norm: Optional[float] = None):
        self.params: List[Tensor] = list(params)
        if clip_norm is not None and clip_norm <= 0:
            raise ContractError("clip norm must be positive")
        self.clip_norm = clip_norm
        if lr <= 0:
            raise ContractError("learning rate must be positive")
        if weight_decay < 0:
            raise ContractError("weight decay must be nonnegative")
        self.lr = float(lr)
        self.weight_decay = float(weight_decay)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = np.zeros_like(p.data)

    def _grads(self) -> List[np.ndarray]:
        grads = []
        for i, p in enumerate(self.params):
            g = np.zeros_like(p.data) if p.grad is None else p.grad
            if not np.all(np.isfinite(g)):
                raise NumericalFailure(f"{self.kind}: non-finite gradient for parameter {i} ({p.name})")
            grads.append(g)
        if self.clip_norm is not None:
            total = float(np.sqrt(sum(float((g * g).sum()) for g in grads)))
            if total > self.clip_norm:
                grads = [g * (self.clip_norm / total) for g in grads]
        return grads

    def step(self) -> None:
        raise NotImplementedError


class SGD(Optimizer):
    """Heavy-ball SGD; weight decay enters as an L2 term on the gradient."""

    kind = "sgd"

    def __init__(self, params, lr: float = 0.01, momentum: float = 0.9, weight_decay: float = 0.0,
                 clip_norm: Optional[float] = None):
        super().__init__(params, lr, weight_decay, clip_norm)
        self.momentum = float(momentum)
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for p, g, v in zip(self.params, self._grads(), self.velocity):
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            if self.momentum:
                v *= self.momentum
                v += g
                g = v
            p.data -= self.lr * g


class Adam(Optimizer):
    kind = "adam"

    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0, clip_norm: Optional[float] = None):
        super().__init__(params, lr, weight_decay, clip_norm)
        self.beta1, self.beta2 = map(float, betas)
        self.eps = float(eps)
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        grads = self._grads()
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(kind: str, params, **kwargs) -> Optimizer:
    kinds = {"sgd": SGD, "adam": Adam}
    if kind not in kinds:
        raise ContractError(f"unknown optimizer {kind!r}")
    return kinds[kind](params, **kwargs)
