"""Parameterized building blocks.

Feature matrices follow the column convention used throughout the package:
an activation batch is ``d x n`` (one instance per column).
"""
from __future__ import annotations

import contextlib
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np

from ..errors import ContractError
from . import tensor as T
from .tensor import Tensor

NONLINEARITIES = {"relu": T.relu, "tanh": T.tanh, "sigmoid": T.sigmoid}


class Module:
    """Minimal container: parameters are the Tensor attributes (recursively)."""

    def named_parameters(self, prefix: str = "") -> List[Tuple[str, Tensor]]:
        out = []
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor):
                out.append((name, value))
            elif isinstance(value, Module):
                out.extend(value.named_parameters(name + "."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.extend(item.named_parameters(f"{name}.{i}."))
                    elif isinstance(item, Tensor):
                        out.append((f"{name}.{i}", item))
        return out

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        if missing:
            raise ContractError(f"state dict missing keys: {sorted(missing)[:5]}")
        for name, p in params.items():
            value = np.asarray(state[name], dtype=p.data.dtype)
            if value.shape != p.shape:
                raise ContractError(f"shape mismatch for {name}: {value.shape} vs {p.shape}")
            p.data[...] = value

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


@contextlib.contextmanager
def frozen(*modules: Module):
    """Use the modules' current values as constants: no gradient reaches them."""
    params = [p for m in modules for p in m.parameters()]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p in params:
            p.requires_grad = True


def kaiming_uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    """Column-wise affine map ``W^T Z + b`` with ``W`` of shape in x out."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True):
        if n_in <= 0 or n_out <= 0:
            raise ContractError("layer widths must be positive")
        self.weight = Tensor(kaiming_uniform(rng, n_in, (n_in, n_out)), requires_grad=True)
        self.bias = Tensor(np.zeros((n_out, 1)), requires_grad=True) if bias else None

    def forward(self, z: Tensor) -> Tensor:
        out = T.matmul(T.transpose(self.weight), z)
        return out if self.bias is None else out + self.bias


class MLP(Module):
    def __init__(self, sizes: Sequence[int], rng: np.random.Generator,
                 nonlinearity: str = "relu", final_activation: bool = False):
        if len(sizes) < 2:
            raise ContractError("an MLP needs at least input and output widths")
        if nonlinearity not in NONLINEARITIES:
            raise ContractError(f"unknown nonlinearity {nonlinearity!r}")
        self.sizes = list(sizes)
        self.nonlinearity = nonlinearity
        self.final_activation = final_activation
        self.layers = [Linear(a, b, rng) for a, b in zip(sizes[:-1], sizes[1:])]

    def forward(self, z: Tensor) -> Tensor:
        act = NONLINEARITIES[self.nonlinearity]
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            z = layer(z)
            if i < last or self.final_activation:
                z = act(z)
        return z


class Classifier(Module):
    """Two affine layers with a hidden nonlinearity; returns n x K probabilities."""

    def __init__(self, d: int, hidden: int, k: int, rng: np.random.Generator,
                 nonlinearity: str = "relu"):
        self.mlp = MLP([d, hidden, k], rng, nonlinearity)

    def logits(self, z: Tensor) -> Tensor:
        return T.transpose(self.mlp(z))

    def forward(self, z: Tensor) -> Tensor:
        return T.softmax(self.logits(z), axis=1)


def build_network(sizes: Sequence[int], k: int, rng: np.random.Generator,
                  hidden: int = 32, nonlinearity: str = "relu") -> Tuple[MLP, Classifier]:
    """Feature extractor over ``sizes`` (input width first, feature width ``d``
    last) plus a two-layer softmax classifier of widths ``[hidden, k]``."""
    if not sizes:
        raise ContractError("empty network spec")
    if any(s <= 0 for s in sizes) or hidden <= 0 or k <= 0:
        raise ContractError("all layer widths must be positive")
    if len(sizes) < 2:
        raise ContractError("network spec needs input and feature widths")
    phi = MLP(sizes, rng, nonlinearity, final_activation=True)
    f = Classifier(sizes[-1], hidden, k, rng, nonlinearity)
    return phi, f


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0):
        fan_in = c_in * kernel * kernel
        self.weight = Tensor(kaiming_uniform(rng, fan_in, (c_out, c_in, kernel, kernel)),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(c_out), requires_grad=True)
        self.stride = stride
        self.padding = padding

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)


# -- whitening ---------------------------------------------------------------
WHITEN_FLOOR = 1e-5


def batch_whiten(z: Tensor, floor: float = WHITEN_FLOOR) -> Tensor:
    """ZCA-whiten the columns of a d x b batch with batch-local statistics."""
    z = T.as_tensor(z)
    if z.ndim != 2 or z.shape[1] < 2:
        raise ContractError(f"batch_whiten needs a d x b batch with b >= 2, got {z.shape}")
    b = z.shape[1]
    centered = z - T.mean(z, axis=1, keepdims=True)
    cov = T.matmul(centered, T.transpose(centered)) / b
    return T.matmul(T.sym_inv_sqrt(cov, floor), centered)


class Whitener:
    """Frozen ZCA statistics for transforming held-out features (no tape)."""

    def __init__(self, z: np.ndarray, floor: float = WHITEN_FLOOR):
        if z.ndim != 2 or z.shape[1] < 2:
            raise ContractError("Whitener needs a d x b matrix with b >= 2")
        self.mean = z.mean(axis=1, keepdims=True)
        c = z - self.mean
        cov = c @ c.T / z.shape[1]
        lam, u = np.linalg.eigh(0.5 * (cov + cov.T))
        self.matrix = (u * np.maximum(lam, floor) ** -0.5) @ u.T

    def __call__(self, z: np.ndarray) -> np.ndarray:
        return self.matrix @ (z - self.mean)


def parameters_of(modules: Iterable[Module]) -> List[Tensor]:
    return [p for m in modules for p in m.parameters()]
