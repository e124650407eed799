"""Clustering objectives and the auxiliary quantities they alternate with.

Probability matrices are ``n x K`` with one instance per row; feature
matrices are ``d x n``.  Class labels on every public function are 1-based.
Auxiliary distributions and source weights enter the losses as constants.
"""
from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Generic, Optional, Tuple, TypeVar

import numpy as np

from .errors import ContractError
from .gradcore import tensor as T
from .gradcore.tensor import Tensor

SIMPLEX_TOL = 1e-8


def _values(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=float)


def check_stochastic(m: np.ndarray, what: str = "matrix", tol: float = SIMPLEX_TOL) -> None:
    if m.ndim != 2:
        raise ContractError(f"{what} must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ContractError(f"{what} has non-finite entries")
    if np.any(m < -tol) or np.any(m > 1 + tol) or np.any(np.abs(m.sum(axis=1) - 1.0) > tol):
        raise ContractError(f"{what} rows are not on the probability simplex")


def check_labels(labels, k: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1 or not np.issubdtype(labels.dtype, np.integer):
        raise ContractError("labels must be a 1-D integer array")
    if labels.size and (labels.min() < 1 or labels.max() > k):
        raise ContractError(f"labels must lie in [1, {k}]")
    return labels


def one_hot(labels, k: int) -> np.ndarray:
    labels = check_labels(labels, k)
    out = np.zeros((labels.size, k))
    out[np.arange(labels.size), labels - 1] = 1.0
    return out


@dataclass
class AuxiliaryState:
    """Per-target-instance auxiliary distributions and per-source weights."""

    Q_t: np.ndarray
    Qtilde_t: np.ndarray
    pseudo_labels: np.ndarray
    source_weights: np.ndarray
    target_centroids: Optional[np.ndarray] = None

    @classmethod
    def initial(cls, pseudo_labels, k: int, n_source: int, target_centroids=None) -> "AuxiliaryState":
        q = one_hot(pseudo_labels, k)
        return cls(q, q.copy(), np.asarray(pseudo_labels), np.ones(n_source), target_centroids)

    def validate(self) -> None:
        check_stochastic(self.Q_t, "Q_t", 1e-10)
        check_stochastic(self.Qtilde_t, "Qtilde_t", 1e-10)
        w = self.source_weights
        if np.any(w < 0) or np.any(w > 1):
            raise ContractError("source weights must lie in [0, 1]")


# -- discriminative clustering ----------------------------------------------
def _xlogx(q: np.ndarray) -> np.ndarray:
    return np.where(q > 0, q * np.log(np.where(q > 0, q, 1.0)), 0.0)


def cluster_balance(q: np.ndarray) -> float:
    """``sum_k rho_k log rho_k`` with ``rho`` the mean of the rows of ``q``."""
    return float(_xlogx(q.mean(axis=0)).sum())


def discriminative_clustering_loss(P: Tensor, Q, balance: float = 1.0) -> Tensor:
    """``KL(Q || P) + sum_k rho_k log rho_k``, differentiable in ``P`` only.

    The balance term depends on ``Q`` alone, so its gradient reaches the
    network only through the closed-form auxiliary update.
    """
    P = T.as_tensor(P)
    Q = np.asarray(Q, dtype=float)
    check_stochastic(P.data, "P")
    check_stochastic(Q, "Q")
    if P.shape != Q.shape:
        raise ContractError(f"P {P.shape} and Q {Q.shape} differ in shape")
    n = Q.shape[0]
    neg_entropy = float(_xlogx(Q).sum()) / n
    cross = T.tsum(T.mul(Q, T.log(P))) / n
    return (neg_entropy + balance * cluster_balance(Q)) - cross


def auxiliary_update(P, balance: float = 1.0) -> np.ndarray:
    """Closed-form auxiliary distribution: ``q_ik ∝ p_ik / sqrt(sum_i' p_i'k)``.

    ``balance`` scales the column-sum exponent (1 gives the square root,
    0 returns ``P`` unchanged).
    """
    P = _values(P)
    check_stochastic(P, "P")
    col = P.sum(axis=0)
    if np.any(col <= 0):
        raise ContractError("auxiliary_update: a class has zero total probability")
    un = P / col ** (0.5 * balance)
    return un / un.sum(axis=1, keepdims=True)


def target_network_loss(P: Tensor, Q) -> Tensor:
    """Cross-entropy of predictions against the auxiliary labels."""
    P = T.as_tensor(P)
    Q = np.asarray(Q, dtype=float)
    check_stochastic(P.data, "P")
    check_stochastic(Q, "Q")
    return -(T.tsum(T.mul(Q, T.log(P))) / Q.shape[0])


# -- structural source regularization ---------------------------------------
def soft_selection_weights(Z_s: np.ndarray, labels_s, centroids: np.ndarray) -> np.ndarray:
    """``w = (1 + cos(mu_y, z)) / 2`` per source column."""
    Z_s = _values(Z_s)
    centroids = _values(centroids)
    labels = check_labels(labels_s, centroids.shape[1])
    mu = centroids[:, labels - 1]
    zn = np.linalg.norm(Z_s, axis=0)
    mn = np.linalg.norm(mu, axis=0)
    if np.any(zn == 0) or np.any(mn == 0):
        raise ContractError("soft_selection_weights: zero-norm feature or centroid")
    cos = np.einsum("dn,dn->n", Z_s, mu) / (zn * mn)
    return np.clip(0.5 * (1.0 + cos), 0.0, 1.0)


def _weighted_nll(P: Tensor, labels, w) -> Tensor:
    P = T.as_tensor(P)
    labels = check_labels(labels, P.shape[1])
    n = labels.size
    w = np.ones(n) if w is None else np.asarray(w, dtype=float)
    if w.shape != (n,):
        raise ContractError("weights must have one entry per instance")
    picked = T.getitem(P, (np.arange(n), labels - 1))
    return -(T.tsum(T.mul(w, T.log(picked))) / n)


def weighted_source_ce(P_s: Tensor, labels_s, weights=None) -> Tensor:
    """``-(1/n_s) sum_i w_i log p_{i, y_i}``; plain cross-entropy when ``weights`` is None."""
    return _weighted_nll(P_s, labels_s, weights)


# -- pseudo-labels ---------------------------------------------------------
def _sse(Z: np.ndarray, mu: np.ndarray, assign: np.ndarray) -> float:
    return float(((Z - mu[:, assign]) ** 2).sum())


def kmeans_pseudolabel(Z_t, init_assignments, k: int, max_iter: int = 100,
                       return_history: bool = False):
    """Lloyd iterations started from prediction-based assignments.

    Returns ``(centroids d x K, labels)`` with 1-based labels; with
    ``return_history`` also the within-cluster SSE after every assignment
    step.  Empty clusters are re-seeded at the point farthest from its
    nearest centroid.
    """
    Z = _values(Z_t)
    d, n = Z.shape
    assign = check_labels(init_assignments, k) - 1
    if n < k:
        raise ContractError(f"k-means needs at least K={k} points, got {n}")
    if assign.size != n:
        raise ContractError("one initial assignment per column required")
    history = []
    mu = np.zeros((d, k))
    for _ in range(max_iter):
        counts = np.bincount(assign, minlength=k)
        sums = np.zeros((d, k))
        np.add.at(sums.T, assign, Z.T)
        filled = counts > 0
        mu[:, filled] = sums[:, filled] / counts[filled]
        for j in np.flatnonzero(~filled):
            live = np.flatnonzero(filled)
            dist = ((Z[:, :, None] - mu[:, None, live]) ** 2).sum(axis=0).min(axis=1)
            mu[:, j] = Z[:, int(np.argmax(dist))]
            filled[j] = True
        dist = ((Z[:, :, None] - mu[:, None, :]) ** 2).sum(axis=0)
        new_assign = np.argmin(dist, axis=1)
        history.append(_sse(Z, mu, new_assign))
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
    labels = assign + 1
    if return_history:
        return mu, labels, history
    return mu, labels


# -- generative clustering --------------------------------------------------
def student_t_assignment(Z: Tensor, C: Tensor) -> Tensor:
    """Soft assignments ``softmax_k 1 / (1 + ||z - c_k||^2)``; returns b x K."""
    Z, C = T.as_tensor(Z), T.as_tensor(C)
    if not (np.all(np.isfinite(Z.data)) and np.all(np.isfinite(C.data))):
        raise ContractError("student_t_assignment: non-finite input")
    kernel = 1.0 / (1.0 + T.sqdist_columns(Z, C))
    return T.softmax(kernel, axis=1)


def student_t_bounds(k: int) -> Tuple[float, float]:
    """Strict open interval containing every assignment probability."""
    e = np.e
    return 1.0 / (1.0 + (k - 1) * e), e / (e + k - 1)


def generative_clustering_loss(Ptilde: Tensor, Qtilde, balance: float = 1.0) -> Tensor:
    return discriminative_clustering_loss(Ptilde, Qtilde, balance)


def generative_source_loss(Ptilde_s: Tensor, labels_s, weights=None) -> Tensor:
    """Weighted cross-entropy of source features against their true centroids."""
    return _weighted_nll(Ptilde_s, labels_s, weights)


# -- combination ------------------------------------------------------------
V = TypeVar("V")


@dataclass
class LossBreakdown(Generic[V]):
    L_fphi_t: V
    L_fphi_s: V
    L_SRDisC: V
    L_phiphi_t: V
    L_phiphi_s: V
    L_SRGenC: V
    L_total: V
    lam: float

    def as_floats(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = v.item() if isinstance(v, Tensor) else float(v)
        return out


def hybrid_loss(L_fphi_t, L_fphi_s, L_phiphi_t, L_phiphi_s, lam: float,
                lambda_on: str = "source") -> LossBreakdown:
    """Assemble the regularized discriminative, generative and total losses.

    ``lambda_on="source"`` weights the source terms by ``lam``;
    ``"target"`` weights the target terms instead.
    """
    if lam < 0:
        raise ContractError("lambda must be nonnegative")
    if lambda_on == "source":
        disc = L_fphi_t + lam * L_fphi_s
        gen = L_phiphi_t + lam * L_phiphi_s
    elif lambda_on == "target":
        disc = lam * L_fphi_t + L_fphi_s
        gen = lam * L_phiphi_t + L_phiphi_s
    else:
        raise ContractError(f"lambda_on must be 'source' or 'target', got {lambda_on!r}")
    return LossBreakdown(L_fphi_t, L_fphi_s, disc, L_phiphi_t, L_phiphi_s, gen, disc + gen, float(lam))
