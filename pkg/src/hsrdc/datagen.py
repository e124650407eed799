"""Synthetic domain pairs, CSV ingestion, and inductive splits.

Instances are stored row-wise (``n x dim``) as they appear on disk; labels
are 1-based integers.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Tuple

import numpy as np
from sklearn.datasets import make_moons

from .errors import ContractError


class CSVParseError(ContractError):
    def __init__(self, path, line: int, reason: str):
        super().__init__(f"{path}:{line}: {reason}")
        self.line = line


@dataclass
class LabeledSet:
    X: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.X.ndim != 2 or self.y.shape != (self.X.shape[0],):
            raise ContractError("LabeledSet needs X (n x dim) and one label per row")

    def __len__(self) -> int:
        return self.X.shape[0]

    @property
    def dim(self) -> int:
        return self.X.shape[1]


@dataclass
class UnlabeledSet:
    X: np.ndarray

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        if self.X.ndim != 2:
            raise ContractError("UnlabeledSet needs X of shape n x dim")

    def __len__(self) -> int:
        return self.X.shape[0]

    @property
    def dim(self) -> int:
        return self.X.shape[1]


@dataclass(frozen=True)
class TrainingView:
    """What a training run may see: labeled source and unlabeled target."""

    source: LabeledSet
    target: UnlabeledSet
    k: int


@dataclass
class DomainPair:
    source: LabeledSet
    target_train: UnlabeledSet
    k: int
    target_test: Optional[LabeledSet] = None
    metadata: dict = field(default_factory=dict)
    _target_train_labels: Optional[np.ndarray] = field(default=None, repr=False)

    @classmethod
    def from_sets(cls, source: LabeledSet, target: LabeledSet, k: int, inductive: bool = True,
                  seed: int = 0, metadata: Optional[dict] = None) -> "DomainPair":
        if inductive:
            train, test = split_inductive(target, seed)
        else:
            train, test = target, None
        return cls(source, UnlabeledSet(train.X), k, test, dict(metadata or {}), train.y.copy())

    def training_view(self) -> TrainingView:
        return TrainingView(self.source, self.target_train, self.k)

    def target_train_labeled(self) -> LabeledSet:
        """Evaluation-only access to the target training labels."""
        if self._target_train_labels is None:
            raise ContractError("no target training labels stored for evaluation")
        return LabeledSet(self.target_train.X, self._target_train_labels)


# -- generators -------------------------------------------------------------
def _sub_seeds(seed: int, count: int) -> list:
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(count)]


def rotation_matrix(theta_deg: float) -> np.ndarray:
    t = math.radians(theta_deg)
    return np.array([[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]])


def gen_two_moons(n: int, noise: float, rotation_deg: float, seed: int) -> LabeledSet:
    """Two interleaving half circles rotated by ``rotation_deg`` about the origin."""
    if n % 2 or n <= 0:
        raise ContractError("two moons needs a positive even n")
    if noise < 0:
        raise ContractError("noise must be nonnegative")
    X, y = make_moons(n_samples=n, noise=noise, random_state=seed)
    X = X @ rotation_matrix(rotation_deg).T
    return LabeledSet(X, y + 1)


def two_moons_pair(n: int = 1000, noise: float = 0.1, rotation_deg: float = 30.0,
                   seed: int = 0, inductive: bool = True) -> DomainPair:
    s_seed, t_seed, split_seed = _sub_seeds(seed, 3)
    source = gen_two_moons(n, noise, 0.0, s_seed)
    target = gen_two_moons(n, noise, rotation_deg, t_seed)
    meta = {"generator": "two_moons", "n": n, "noise": noise, "rotation_deg": rotation_deg, "seed": seed}
    pair = DomainPair.from_sets(source, target, 2, inductive, split_seed, meta)
    pair.metadata.update(structural_check(pair.source, target, 2))
    return pair


def gaussian_class_means(k: int, dim: int, sep: float, seed: int) -> np.ndarray:
    if k <= dim:
        return sep * np.eye(dim)[:k]
    rng = np.random.default_rng(seed)
    dirs = rng.standard_normal((k, dim))
    return sep * dirs / np.linalg.norm(dirs, axis=1, keepdims=True)


def gen_gaussian_shift(k: int, dim: int, sep: float, shift, cov_scale: float = 1.0,
                       n_per_class: int = 200, seed: int = 0, inductive: bool = True) -> DomainPair:
    """Source: K unit-covariance Gaussians at ``sep``-scaled class means.

    Target: the same means translated by ``shift`` with covariance
    ``cov_scale * I``.
    """
    if k < 2:
        raise ContractError("need K >= 2")
    if cov_scale <= 0:
        raise ContractError("cov_scale must be positive")
    shift = np.broadcast_to(np.asarray(shift, dtype=float), (dim,))
    mean_seed, s_seed, t_seed, split_seed = _sub_seeds(seed, 4)
    means = gaussian_class_means(k, dim, sep, mean_seed)
    labels = np.repeat(np.arange(1, k + 1), n_per_class)

    def sample(rng_seed, offset, scale):
        rng = np.random.default_rng(rng_seed)
        X = means[labels - 1] + offset + math.sqrt(scale) * rng.standard_normal((labels.size, dim))
        order = rng.permutation(labels.size)
        return LabeledSet(X[order], labels[order])

    source = sample(s_seed, 0.0, 1.0)
    target = sample(t_seed, shift, cov_scale)
    meta = {"generator": "gaussian_shift", "k": k, "dim": dim, "sep": sep,
            "shift": shift.tolist(), "cov_scale": cov_scale, "n_per_class": n_per_class, "seed": seed}
    pair = DomainPair.from_sets(source, target, k, inductive, split_seed, meta)
    pair.metadata.update(structural_check(source, target, k))
    return pair


def structural_check(source: LabeledSet, target: LabeledSet, k: int) -> dict:
    """Class-wise closeness surrogate: same-class cross-domain mean distance
    versus the smallest distance between different class means."""
    ms = np.stack([source.X[source.y == c].mean(axis=0) for c in range(1, k + 1)])
    mt = np.stack([target.X[target.y == c].mean(axis=0) for c in range(1, k + 1)])
    same = float(np.linalg.norm(ms - mt, axis=1).max())
    gaps = np.linalg.norm(ms[:, None] - ms[None, :], axis=2)
    inter = float(gaps[~np.eye(k, dtype=bool)].min())
    return {"same_class_shift": same, "inter_class_gap": inter, "class_wise_close": same < inter}


# -- splits -----------------------------------------------------------------
def split_inductive(data: LabeledSet, seed: int) -> Tuple[LabeledSet, LabeledSet]:
    """Random per-class half-half split; the training half takes the ceiling."""
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for c in np.unique(data.y):
        idx = np.flatnonzero(data.y == c)
        if idx.size < 2:
            raise ContractError(f"class {c} has fewer than 2 instances")
        idx = rng.permutation(idx)
        cut = (idx.size + 1) // 2
        train_idx.append(idx[:cut])
        test_idx.append(idx[cut:])
    tr = np.sort(np.concatenate(train_idx))
    te = np.sort(np.concatenate(test_idx))
    return LabeledSet(data.X[tr], data.y[tr]), LabeledSet(data.X[te], data.y[te])


# -- CSV --------------------------------------------------------------------
def save_csv(path, data, precision: int = 17) -> None:
    """Header row ``x1,...,xd[,label]``; features as decimals."""
    X = data.X
    labeled = isinstance(data, LabeledSet)
    header = [f"x{i + 1}" for i in range(X.shape[1])] + (["label"] if labeled else [])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(X.shape[0]):
            row = [format(v, f".{precision}g") for v in X[i]]
            if labeled:
                row.append(str(int(data.y[i])))
            w.writerow(row)


def load_csv(path):
    """Parse a numeric CSV; a final header column named ``label`` marks a labeled set."""
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise CSVParseError(path, 1, "empty file: header row required")
    header = [h.strip() for h in rows[0]]
    labeled = bool(header) and header[-1].lower() == "label"
    width = len(header)
    n_feat = width - 1 if labeled else width
    if n_feat < 1:
        raise CSVParseError(path, 1, "no feature columns")
    X = np.empty((len(rows) - 1, n_feat))
    y = np.empty(len(rows) - 1, dtype=np.int64)
    for i, row in enumerate(rows[1:]):
        line = i + 2
        if len(row) != width:
            raise CSVParseError(path, line, f"expected {width} fields, found {len(row)}")
        try:
            X[i] = [float(v) for v in row[:n_feat]]
        except ValueError:
            raise CSVParseError(path, line, "non-numeric feature value") from None
        if labeled:
            try:
                y[i] = int(row[-1])
            except ValueError:
                raise CSVParseError(path, line, "label must be an integer") from None
    return LabeledSet(X, y) if labeled else UnlabeledSet(X)
