"""Self-attentive cluster-centroid learner.

A stack of multihead attention blocks pools a ``d x n`` feature set into
``K`` centroids through ``K`` trainable seed columns.  Every block works
on column sets, so the learner is invariant to the order of its input
columns.
"""
from __future__ import annotations

from typing import List

import numpy as np

from .errors import ContractError
from .gradcore import tensor as T
from .gradcore.nn import MLP, Module, batch_whiten, kaiming_uniform
from .gradcore.tensor import Tensor


BRANCH_GAIN = 0.1


class MultiheadAttention(Module):
    def __init__(self, d: int, heads: int, rng: np.random.Generator):
        if d % heads:
            raise ContractError(f"feature width {d} not divisible by head count {heads}")
        self.d = d
        self.heads = heads
        dh = d // heads
        self.w_query = [Tensor(kaiming_uniform(rng, d, (d, dh)), requires_grad=True) for _ in range(heads)]
        self.w_key = [Tensor(kaiming_uniform(rng, d, (d, dh)), requires_grad=True) for _ in range(heads)]
        self.w_value = [Tensor(kaiming_uniform(rng, d, (d, dh)), requires_grad=True) for _ in range(heads)]
        self.w_out = Tensor(kaiming_uniform(rng, d, (d, d)), requires_grad=True)

    def forward(self, z1: Tensor, z2: Tensor, z3: Tensor) -> Tensor:
        return multihead_attention(z1, z2, z3, self)


def multihead_attention(z1, z2, z3, params: MultiheadAttention) -> Tensor:
    """Queries from ``z1`` (d x a), keys ``z2`` and values ``z3`` (d x b);
    returns d x a.  Scores are scaled by ``1/sqrt(d)`` and normalized over
    the keys of each query; head outputs are stacked and mixed by ``w_out``."""
    z1, z2, z3 = T.as_tensor(z1), T.as_tensor(z2), T.as_tensor(z3)
    d = params.d
    for z in (z1, z2, z3):
        if z.ndim != 2 or z.shape[0] != d:
            raise ContractError(f"attention inputs must be {d} x n, got {z.shape}")
    if z2.shape[1] != z3.shape[1]:
        raise ContractError("keys and values must have the same column count")
    scale = 1.0 / np.sqrt(d)
    heads = []
    for wq, wk, wv in zip(params.w_query, params.w_key, params.w_value):
        q = T.matmul(T.transpose(wq), z1)
        k = T.matmul(T.transpose(wk), z2)
        v = T.matmul(T.transpose(wv), z3)
        attn = T.softmax(T.matmul(T.transpose(q), k) * scale, axis=1)  # a x b
        heads.append(T.matmul(v, T.transpose(attn)))  # dh x a
    return T.matmul(T.transpose(params.w_out), T.concat(heads, axis=0))


class MAB(Module):
    """Residual attention block followed by a residual column-wise MLP."""

    def __init__(self, d: int, heads: int, rng: np.random.Generator, mlp_depth: int = 3,
                 branch_gain: float = BRANCH_GAIN):
        self.attention = MultiheadAttention(d, heads, rng)
        self.mlp = MLP([d] * (mlp_depth + 1), rng, "relu")
        # Without normalization each residual branch roughly doubles the
        # scale; shrinking the branch outputs keeps C near the seeds at start.
        self.attention.w_out.data *= branch_gain
        self.mlp.layers[-1].weight.data *= branch_gain

    def forward(self, z1: Tensor, z2: Tensor) -> Tensor:
        return mab(z1, z2, self)


def mab(z1, z2, params: MAB) -> Tensor:
    z1 = T.as_tensor(z1)
    inner = z1 + params.attention(z1, z2, z2)
    return inner + params.mlp(inner)


class CentroidLearner(Module):
    """Maps a feature set to K centroids: self-attention over the set, an
    extra MLP, seed-query pooling, then self-attention among the seeds."""

    def __init__(self, d: int, k: int, rng: np.random.Generator, heads: int = 4, mlp_depth: int = 3,
                 branch_gain: float = BRANCH_GAIN):
        if k < 1:
            raise ContractError("need at least one centroid")
        self.d = d
        self.k = k
        self.heads = heads
        self.block_set = MAB(d, heads, rng, mlp_depth, branch_gain)
        self.mlp_hat = MLP([d] * (mlp_depth + 1), rng, "relu")
        self.block_pool = MAB(d, heads, rng, mlp_depth, branch_gain)
        self.block_seeds = MAB(d, heads, rng, mlp_depth, branch_gain)
        self.seeds = Tensor(rng.standard_normal((d, k)), requires_grad=True)

    def forward(self, z: Tensor) -> Tensor:
        return learn_centroids(z, self)


def learn_centroids(z, params: CentroidLearner) -> Tensor:
    z = T.as_tensor(z)
    if z.ndim != 2 or z.shape[0] != params.d or z.shape[1] < 1:
        raise ContractError(f"learner input must be {params.d} x n with n >= 1, got {z.shape}")
    encoded = params.mlp_hat(params.block_set(z, z))
    pooled = params.block_pool(params.seeds, encoded)
    return params.block_seeds(pooled, pooled)


def whiten_and_concat(z_s, z_t) -> Tensor:
    """Whiten each domain's batch separately, then stack the columns."""
    return T.concat([batch_whiten(z_s), batch_whiten(z_t)], axis=1)
