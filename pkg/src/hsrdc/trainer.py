"""Training loop for regularized discriminative + generative clustering.

One loop serves every model family.  A *task* object owns the networks and
the data of one problem (vector classification here, per-pixel
segmentation in :mod:`hsrdc.segext`) and exposes batches of features and
predictions in a common layout:

* ``Z_s``, ``Z_t``: ``d x m`` feature columns (instances or feature-map
  locations);
* ``P_s``, ``P_t``: ``r x K`` classifier probabilities (instances or pixels).

The loop owns schedules, auxiliary distributions, pseudo-labels, source
weights, the centroid learner and optimizers.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import math
from pathlib import Path
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np

from . import objectives as obj
from .centroids import CentroidLearner, whiten_and_concat
from .datagen import DomainPair, LabeledSet, TrainingView, UnlabeledSet
from .errors import ContractError, NumericalDomainError, NumericalFailure
from .evalkit import accuracy, cluster_size_entropy, compute_diagnostics
from .gradcore import tensor as T
from .gradcore.nn import MLP, Module, Whitener, build_network, frozen, parameters_of
from .gradcore.optim import SGD, Adam
from .gradcore.tensor import Tensor, backward, no_grad

log = logging.getLogger(__name__)


# -- schedules --------------------------------------------------------------
def lambda_schedule(i: float, gamma: float = 10.0) -> float:
    """``2 / (1 + exp(-gamma i)) - 1``: rises from 0 toward 1."""
    if not 0.0 <= i <= 1.0:
        raise ContractError("schedule progress must lie in [0, 1]")
    return 2.0 / (1.0 + math.exp(-gamma * i)) - 1.0


def lr_schedule(i: float, eta0: float = 0.01, alpha: float = 10.0, gamma: float = 0.75) -> float:
    """``eta0 (1 + alpha i)^(-gamma)``: decays from ``eta0``."""
    if not 0.0 <= i <= 1.0:
        raise ContractError("schedule progress must lie in [0, 1]")
    return eta0 * (1.0 + alpha * i) ** (-gamma)


def epoch_progress(epoch: int, epochs: int) -> float:
    """Zero-based epoch index normalized to [0, 1]."""
    return epoch / (epochs - 1) if epochs > 1 else 0.0


# -- configuration ----------------------------------------------------------
ABLATIONS = {
    "source_only": dict(use_disc=False, use_genc=False, use_source_reg=True, use_soft_selection=False),
    "disc": dict(use_disc=True, use_genc=False, use_source_reg=False, use_soft_selection=False),
    "genc": dict(use_disc=False, use_genc=True, use_source_reg=False, use_soft_selection=False),
    "disc_genc": dict(use_disc=True, use_genc=True, use_source_reg=False, use_soft_selection=False),
    "srdisc": dict(use_disc=True, use_genc=False, use_source_reg=True, use_soft_selection=False),
    "srgenc": dict(use_disc=False, use_genc=True, use_source_reg=True, use_soft_selection=False),
    "srdisc_srgenc": dict(use_disc=True, use_genc=True, use_source_reg=True, use_soft_selection=False),
    "hsrdc": dict(use_disc=True, use_genc=True, use_source_reg=True, use_soft_selection=True),
}


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 64
    iterations_per_epoch: Optional[int] = None
    warmup_epochs: int = 0
    d: int = 32
    phi_hidden: List[int] = field(default_factory=lambda: [64, 64])
    classifier_hidden: int = 32
    heads: int = 4
    # penalty schedule
    lambda_mode: str = "schedule"
    lambda_gamma: float = 10.0
    lambda_fixed: float = 1.0
    lambda_on: str = "source"
    # network optimizer (SGD-momentum) and learner optimizer (Adam)
    lr0: float = 0.01
    lr_alpha: float = 10.0
    lr_gamma: float = 0.75
    momentum: float = 0.9
    weight_decay: float = 1e-4
    learner_lr: float = 1e-3
    grad_clip: Optional[float] = 5.0
    # ablation switches
    use_disc: bool = True
    use_genc: bool = True
    use_source_reg: bool = True
    use_soft_selection: bool = True
    balance_weight: float = 1.0
    shuffle: bool = True
    seed: int = 0
    diagnostics: bool = True
    diag_max_cols: int = 256
    learner_max_cols: int = 256
    kmeans_max_iter: int = 100

    def __post_init__(self):
        if self.epochs < 1:
            raise ContractError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ContractError("batch size must be >= 2")
        for name in ("lr0", "learner_lr"):
            if getattr(self, name) <= 0:
                raise ContractError(f"{name} must be positive")
        if self.lambda_mode not in ("schedule", "fixed"):
            raise ContractError("lambda_mode must be 'schedule' or 'fixed'")
        if self.lambda_on not in ("source", "target"):
            raise ContractError("lambda_on must be 'source' or 'target'")
        if self.d % self.heads:
            raise ContractError("d must be divisible by the head count")

    @property
    def method(self) -> str:
        flags = (self.use_disc, self.use_genc, self.use_source_reg, self.use_soft_selection)
        for name, spec in ABLATIONS.items():
            if flags == tuple(spec.values()):
                return name
        return "custom"

    def with_ablation(self, name: str) -> "TrainConfig":
        if name not in ABLATIONS:
            raise ContractError(f"unknown ablation {name!r}; choose from {sorted(ABLATIONS)}")
        return dataclasses.replace(self, **ABLATIONS[name])

    @classmethod
    def from_mapping(cls, values: Dict[str, object]) -> "TrainConfig":
        known = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in known:
                raise ContractError(f"unknown train config key {key!r}")
            kwargs[key] = _coerce(raw, known[key].type, key)
        return cls(**kwargs)

    def to_mapping(self) -> Dict[str, object]:
        return dataclasses.asdict(self)


def _coerce(raw, type_name, key):
    if not isinstance(raw, str):
        return raw
    text = str(type_name)
    try:
        if "bool" in text:
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if "List[int]" in text:
            return [int(v) for v in raw.replace("[", "").replace("]", "").split(",") if v.strip()]
        if "Optional" in text and raw.lower() in ("", "none"):
            return None
        if "int" in text:
            return int(raw)
        if "float" in text:
            return float(raw)
    except ValueError:
        raise ContractError(f"config key {key!r}: cannot parse {raw!r}") from None
    return raw


# -- batches and tasks --------------------------------------------------------
@dataclass
class Batch:
    idx_s: np.ndarray
    idx_t: np.ndarray
    Z_s: Tensor
    Z_t: Tensor
    P_s: Tensor
    P_t: Tensor
    extras: dict = field(default_factory=dict)


class ClassificationTask:
    """Vector instances: one feature column and one prediction row per unit."""

    cols_per_unit = 1
    rows_per_unit = 1
    uses_soft_selection = True

    def __init__(self, view: TrainingView, config: TrainConfig, rng: np.random.Generator,
                 phi: Optional[Module] = None, f: Optional[Module] = None):
        self.k = view.k
        self.d = config.d
        self.Xs = view.source.X
        self.ys = view.source.y
        self.Xt = view.target.X
        if view.source.dim != view.target.dim:
            raise ContractError("source and target feature dimensions differ")
        if phi is None or f is None:
            sizes = [view.source.dim, *config.phi_hidden, config.d]
            phi, f = build_network(sizes, self.k, rng, config.classifier_hidden)
        self.phi, self.f = phi, f

    @property
    def n_source(self) -> int:
        return self.Xs.shape[0]

    @property
    def n_target(self) -> int:
        return self.Xt.shape[0]

    @property
    def feature_modules(self) -> List[Module]:
        return [self.phi]

    @property
    def classifier_modules(self) -> List[Module]:
        return [self.f]

    def forward(self, idx_s, idx_t) -> Batch:
        Z_s = self.phi(Tensor(self.Xs[idx_s].T))
        Z_t = self.phi(Tensor(self.Xt[idx_t].T))
        return Batch(idx_s, idx_t, Z_s, Z_t, self.f(Z_s), self.f(Z_t))

    def rows_from_cols(self, col_labels: np.ndarray) -> np.ndarray:
        """Map per-feature-column labels (units x cols) to prediction rows."""
        return col_labels.reshape(-1)

    def disc_source_loss(self, batch: Batch, weights: np.ndarray) -> Tensor:
        return obj.weighted_source_ce(batch.P_s, self.ys[batch.idx_s], weights)

    def gen_source_loss(self, Ptilde_s: Tensor, batch: Batch, weights: np.ndarray) -> Tensor:
        return obj.generative_source_loss(Ptilde_s, self.ys[batch.idx_s], weights)

    def embed(self, X: np.ndarray):
        """Features (d x n) and feature-resolution probabilities (n x K), no tape."""
        with no_grad():
            Z = self.phi(Tensor(X.T))
            P = self.f(Z)
        return Z.data, P.data

    def embed_source(self):
        return self.embed(self.Xs)

    def embed_target(self):
        return self.embed(self.Xt)

    def source_labels_per_col(self) -> np.ndarray:
        return self.ys

    @classmethod
    def for_inference(cls, dim: int, k: int, config: TrainConfig) -> "ClassificationTask":
        """Networks only, no data: the shell a saved model is loaded into."""
        empty = TrainingView(LabeledSet(np.empty((0, dim)), np.empty(0, dtype=np.int64)),
                             UnlabeledSet(np.empty((0, dim))), k)
        return cls(empty, config, np.random.default_rng(0))

    def describe(self) -> dict:
        return {"kind": "classification", "dim": int(self.Xs.shape[1]), "k": self.k}

    def extra_generator_loss(self, batch: Batch, state: "LoopState") -> Optional[Tensor]:
        return None

    def after_step(self, batch: Batch, state: "LoopState") -> Dict[str, float]:
        return {}


@dataclass
class LoopState:
    epoch: int = 0
    lam: float = 0.0
    lr: float = 0.0
    pseudo_cols: Optional[np.ndarray] = None  # units x cols, 1-based
    target_centroids: Optional[np.ndarray] = None
    source_weights: Optional[np.ndarray] = None
    rng: Optional[np.random.Generator] = None


@dataclass
class TrainedModel:
    task: object
    learner: Optional[CentroidLearner]
    config: TrainConfig
    k: int
    centroids: Optional[np.ndarray] = None
    target_whitener: Optional[Whitener] = None

    def state_dict(self) -> Dict[str, np.ndarray]:
        out = {}
        for prefix, mods in (("phi", self.task.feature_modules), ("f", self.task.classifier_modules)):
            for i, m in enumerate(mods):
                out.update({f"{prefix}{i}.{k}": v for k, v in m.state_dict().items()})
        if self.learner is not None:
            out.update({f"learner.{k}": v for k, v in self.learner.state_dict().items()})
        return out

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        for prefix, mods in (("phi", self.task.feature_modules), ("f", self.task.classifier_modules)):
            for i, m in enumerate(mods):
                tag = f"{prefix}{i}."
                m.load_state_dict({k[len(tag):]: v for k, v in state.items() if k.startswith(tag)})
        if self.learner is not None:
            self.learner.load_state_dict({k[8:]: v for k, v in state.items() if k.startswith("learner.")})


@dataclass
class RunResult:
    model: TrainedModel
    metrics: List[Dict[str, float]]
    best_state: Optional[Dict[str, np.ndarray]] = None
    final_state: Optional[Dict[str, np.ndarray]] = None


class _CyclicSampler:
    """Independent reshuffled passes over one domain."""

    def __init__(self, n: int, rng: np.random.Generator, shuffle: bool = True):
        self.n = n
        self.rng = rng
        self.shuffle = shuffle
        self.order = self._new_order()
        self.pos = 0

    def _new_order(self):
        return self.rng.permutation(self.n) if self.shuffle else np.arange(self.n)

    def next(self, size: int) -> np.ndarray:
        out = []
        need = size
        while need > 0:
            if self.pos >= self.n:
                self.order = self._new_order()
                self.pos = 0
            take = self.order[self.pos:self.pos + need]
            self.pos += take.size
            need -= take.size
            out.append(take)
        return np.concatenate(out)


# -- the loop -----------------------------------------------------------------
def _check_finite_loss(value: float, what: str, checkpoint) -> None:
    if not np.isfinite(value):
        raise NumericalFailure(f"non-finite {what}", checkpoint)


def build_learner(config: TrainConfig, k: int, rng) -> CentroidLearner:
    return CentroidLearner(config.d, k, rng, config.heads)


def refresh_pseudo_labels(task, config: TrainConfig, k: int):
    """k-means over all target feature columns, started from the argmax of the
    classifier predictions; returns (features, centroids, labels per unit)."""
    Z_t, P_t = task.embed_target()
    init = np.argmax(P_t, axis=1) + 1
    mu, labels = obj.kmeans_pseudolabel(Z_t, init, k, config.kmeans_max_iter)
    return Z_t, mu, labels.reshape(task.n_target, task.cols_per_unit)


def _whitened_full(task):
    Z_s, _ = task.embed_source()
    Z_t, _ = task.embed_target()
    ws, wt = Whitener(Z_s), Whitener(Z_t)
    return Z_s, Z_t, ws(Z_s), wt(Z_t), wt


def _diag_subsample(n: int, limit: int, seed_seq) -> np.ndarray:
    if n <= limit:
        return np.arange(n)
    return np.sort(np.random.default_rng(seed_seq).choice(n, size=limit, replace=False))


def run_training(task, config: TrainConfig, rng: np.random.Generator,
                 evaluate: Optional[Callable[["TrainedModel", LoopState], Dict[str, float]]] = None,
                 learner: Optional[CentroidLearner] = None) -> RunResult:
    """Alternate auxiliary updates and network steps for ``config.epochs`` epochs."""
    k = task.k
    source_only = not (config.use_disc or config.use_genc)
    if config.use_genc and learner is None:
        learner = build_learner(config, k, rng)
    train_f = config.use_disc or source_only
    net_modules = task.feature_modules + (task.classifier_modules if train_f else [])
    opt_net = SGD(parameters_of(net_modules), lr=config.lr0, momentum=config.momentum,
                  weight_decay=config.weight_decay, clip_norm=config.grad_clip)
    opt_learner = (Adam(learner.parameters(), lr=config.learner_lr, clip_norm=config.grad_clip)
                   if learner is not None else None)
    model = TrainedModel(task, learner, config, k)
    sampler_rng = np.random.default_rng(rng.integers(2 ** 63))
    diag_seed = int(rng.integers(2 ** 63))
    sampler_s = _CyclicSampler(task.n_source, sampler_rng, config.shuffle)
    sampler_t = _CyclicSampler(task.n_target, sampler_rng, config.shuffle)
    iters = config.iterations_per_epoch or math.ceil(max(task.n_source, task.n_target) / config.batch_size)
    bs = min(config.batch_size, task.n_source)
    bt = min(config.batch_size, task.n_target)

    state = LoopState(rng=np.random.default_rng(rng.integers(2 ** 63)))

    # source pre-training: classifier on source CE and, when present, the
    # centroid learner on the generative source loss
    warm_opt = SGD(parameters_of(task.feature_modules + task.classifier_modules), lr=config.lr0,
                   momentum=config.momentum, weight_decay=config.weight_decay, clip_norm=config.grad_clip)
    for _ in range(config.warmup_epochs):
        for _ in range(iters):
            batch = task.forward(sampler_s.next(bs), sampler_t.next(bt))
            loss = task.disc_source_loss(batch, None)
            if learner is not None:
                Zw = whiten_and_concat(batch.Z_s, batch.Z_t)
                ms = batch.Z_s.shape[1]
                C = learner(_learner_input(Zw, ms, config.learner_max_cols, state.rng))
                Pt_s = obj.student_t_assignment(T.getitem(Zw, (slice(None), slice(0, ms))), C)
                loss = loss + task.gen_source_loss(Pt_s, batch, None)
            _check_finite_loss(loss.item(), "warm-up loss", None)
            warm_opt.zero_grad()
            if opt_learner is not None:
                opt_learner.zero_grad()
            backward(loss)
            warm_opt.step()
            if opt_learner is not None:
                opt_learner.step()

    state.source_weights = np.ones(task.n_source)
    needs_pseudo = config.use_disc or config.use_genc or config.diagnostics
    if needs_pseudo:
        _, state.target_centroids, state.pseudo_cols = refresh_pseudo_labels(task, config, k)

    metrics: List[Dict[str, float]] = []
    last_good = model.state_dict()
    best_state, best_score = None, math.inf
    try:
        for epoch in range(config.epochs):
            progress = epoch_progress(epoch, config.epochs)
            state.epoch = epoch
            state.lam = (lambda_schedule(progress, config.lambda_gamma) if config.lambda_mode == "schedule"
                         else config.lambda_fixed)
            state.lr = lr_schedule(progress, config.lr0, config.lr_alpha, config.lr_gamma)
            opt_net.lr = state.lr
            sums: Dict[str, float] = {}
            for _ in range(iters):
                batch = task.forward(sampler_s.next(bs), sampler_t.next(bt))
                parts, total = _batch_objective(task, batch, config, state, learner, source_only)
                extra = task.extra_generator_loss(batch, state)
                if extra is not None:
                    total = total + extra
                    parts["L_extra"] = extra.item()
                parts["L_total"] = total.item()
                _check_finite_loss(parts["L_total"], "training loss", last_good)
                opt_net.zero_grad()
                if opt_learner is not None:
                    opt_learner.zero_grad()
                backward(total)
                try:
                    opt_net.step()
                    if opt_learner is not None:
                        opt_learner.step()
                except NumericalFailure as exc:
                    raise NumericalFailure(str(exc), last_good) from None
                parts.update(task.after_step(batch, state))
                for key, v in parts.items():
                    sums[key] = sums.get(key, 0.0) + v
            last_good = model.state_dict()
            row = {"epoch": epoch + 1, "lambda": state.lam, "lr": state.lr}
            row.update({key: v / iters for key, v in sums.items()})

            # per-epoch refresh of pseudo-labels, target centroids and source weights
            if needs_pseudo:
                Z_t_all, state.target_centroids, state.pseudo_cols = refresh_pseudo_labels(task, config, k)
                if config.use_soft_selection and task.uses_soft_selection:
                    Z_s_all, _ = task.embed_source()
                    state.source_weights = _source_weights(
                        Z_s_all, task.source_labels_per_col(), state.target_centroids)
                row["mean_source_weight"] = float(state.source_weights.mean())
            if learner is not None or config.diagnostics:
                _finalize_generative(model, task, learner, config, diag_seed)
            if config.diagnostics:
                row.update(_epoch_diagnostics(model, task, state, k))
            if evaluate is not None:
                row.update(evaluate(model, state))
            metrics.append(row)
            score = row.get("L_fphi_t", 0.0) + row.get("L_phiphi_t", 0.0)
            if (config.use_disc or config.use_genc) and score < best_score:
                best_score, best_state = score, model.state_dict()
    except NumericalDomainError as exc:
        raise NumericalFailure(str(exc), last_good) from None
    return RunResult(model, metrics, best_state, model.state_dict())


def _strictly_positive(P: np.ndarray) -> np.ndarray:
    """Undo softmax underflow so every class keeps some column mass."""
    P = np.maximum(P, T.LOG_FLOOR)
    return P / P.sum(axis=1, keepdims=True)


def _source_weights(Z_s, labels, mu) -> np.ndarray:
    """Soft-selection weights; all-zero (dead ReLU) features and empty-cluster
    centroids carry no direction and get the neutral weight 1/2."""
    w = np.full(Z_s.shape[1], 0.5)
    ok = (np.linalg.norm(Z_s, axis=0) > 0) & (np.linalg.norm(mu, axis=0)[labels - 1] > 0)
    if ok.any():
        w[ok] = obj.soft_selection_weights(Z_s[:, ok], labels[ok], mu)
    return w


def _batch_objective(task, batch: Batch, config: TrainConfig, state: LoopState,
                     learner: Optional[CentroidLearner], source_only: bool):
    zero = Tensor(0.0)
    parts: Dict[str, float] = {}
    w_units = state.source_weights[batch.idx_s] if config.use_soft_selection else None
    w_rows = None if w_units is None else np.repeat(w_units, task.rows_per_unit)
    w_cols = None if w_units is None else np.repeat(w_units, task.cols_per_unit)
    first_epoch = state.epoch == 0

    L_fphi_s = task.disc_source_loss(batch, w_rows) if (config.use_source_reg and (config.use_disc or source_only)) else zero
    if source_only:
        parts["L_fphi_s"] = L_fphi_s.item()
        return parts, L_fphi_s

    L_fphi_t = zero
    if config.use_disc:
        if first_epoch:
            Q = obj.one_hot(task.rows_from_cols(state.pseudo_cols[batch.idx_t]), task.k)
        else:
            Q = obj.auxiliary_update(_strictly_positive(batch.P_t.data), config.balance_weight)
        L_fphi_t = obj.discriminative_clustering_loss(batch.P_t, Q, config.balance_weight)

    L_phiphi_t = L_phiphi_s = zero
    if config.use_genc:
        Zw = whiten_and_concat(batch.Z_s, batch.Z_t)
        ms = batch.Z_s.shape[1]
        C = learner(_learner_input(Zw, ms, config.learner_max_cols, state.rng))
        Pt_s = obj.student_t_assignment(T.getitem(Zw, (slice(None), slice(0, ms))), C)
        Pt_t = obj.student_t_assignment(T.getitem(Zw, (slice(None), slice(ms, None))), C)
        if first_epoch:
            Qt = obj.one_hot(state.pseudo_cols[batch.idx_t].reshape(-1), task.k)
        else:
            Qt = obj.auxiliary_update(_strictly_positive(Pt_t.data), config.balance_weight)
        L_phiphi_t = obj.generative_clustering_loss(Pt_t, Qt, config.balance_weight)
        if config.use_source_reg:
            L_phiphi_s = task.gen_source_loss(Pt_s, batch, w_cols)
    # the penalty only exists between a clustering term and its source
    # regularizer; unregularized rows train on the plain target objective
    lam = state.lam if config.use_source_reg else 1.0
    breakdown = obj.hybrid_loss(L_fphi_t, L_fphi_s, L_phiphi_t, L_phiphi_s, lam, config.lambda_on)
    parts.update({k: v for k, v in breakdown.as_floats().items() if k not in ("lam", "L_total")})
    return parts, breakdown.L_total


def _learner_input(Zw: Tensor, ms: int, limit: int, rng) -> Tensor:
    """Per-domain random column subsample (at most ``limit`` each) fed to the
    centroid learner; small batches pass through unchanged."""
    mt = Zw.shape[1] - ms
    if ms <= limit and mt <= limit:
        return Zw
    cols_s = np.sort(rng.choice(ms, size=min(ms, limit), replace=False))
    cols_t = ms + np.sort(rng.choice(mt, size=min(mt, limit), replace=False))
    return T.getitem(Zw, (slice(None), np.concatenate([cols_s, cols_t])))


def _finalize_generative(model: TrainedModel, task, learner, config: TrainConfig, diag_seed: int) -> None:
    Z_s, Z_t, Zw_s, Zw_t, wt = _whitened_full(task)
    model.target_whitener = wt
    model._whitened = (Zw_s, Zw_t)
    model._raw = (Z_s, Z_t)
    if learner is None:
        model.centroids = None
        return
    ss = np.random.SeedSequence(diag_seed).spawn(2)
    cols_s = _diag_subsample(Zw_s.shape[1], config.diag_max_cols, ss[0])
    cols_t = _diag_subsample(Zw_t.shape[1], config.diag_max_cols, ss[1])
    with no_grad():
        C = learner(Tensor(np.concatenate([Zw_s[:, cols_s], Zw_t[:, cols_t]], axis=1)))
    model.centroids = C.data


def _epoch_diagnostics(model: TrainedModel, task, state: LoopState, k: int) -> Dict[str, float]:
    ys, yt = task.source_labels_per_col(), state.pseudo_cols.reshape(-1)
    # cross-domain and class-mean distances are taken in the raw feature space,
    # since per-domain whitening removes the very offset they measure; centroid
    # distances stay in the whitened space the centroids live in
    Z_s, Z_t = model._raw
    out = compute_diagnostics(Z_s, ys, Z_t, yt, k=k).as_dict()
    if model.centroids is not None:
        Zw_s, Zw_t = model._whitened
        cen = compute_diagnostics(Zw_s, ys, Zw_t, yt, model.centroids, k).as_dict()
        out.update({key: v for key, v in cen.items() if key.endswith("_to_centroid")})
    out["target_cluster_entropy"] = cluster_size_entropy(state.pseudo_cols.reshape(-1), k)
    return out


# -- public API -------------------------------------------------------------
def infer(model: TrainedModel, X: np.ndarray) -> np.ndarray:
    """Argmax of the classifier output, 1-based; ties go to the lowest class."""
    _, P = model.task.embed(np.asarray(X, dtype=float))
    return np.argmax(P, axis=1) + 1


def predict_generative(model: TrainedModel, X: np.ndarray) -> np.ndarray:
    """Cluster assignments from learned centroids, in the target whitened space."""
    if model.centroids is None or model.target_whitener is None:
        raise ContractError("model has no learned centroids")
    Z, _ = model.task.embed(np.asarray(X, dtype=float))
    with no_grad():
        P = obj.student_t_assignment(Tensor(model.target_whitener(Z)), Tensor(model.centroids))
    return np.argmax(P.data, axis=1) + 1


def predict(model: TrainedModel, X: np.ndarray) -> np.ndarray:
    """Classifier predictions, or generative assignments for runs that never
    train the classifier on target data (GenC-style ablations)."""
    cfg = model.config
    if cfg.use_genc and not cfg.use_disc:
        return predict_generative(model, X)
    return infer(model, X)


def make_classification_evaluator(pair: DomainPair):
    labels = pair._target_train_labels
    test = pair.target_test

    def evaluate(model: TrainedModel, state: LoopState) -> Dict[str, float]:
        pred_train = predict(model, pair.target_train.X)
        out = {"target_pred_entropy": cluster_size_entropy(pred_train, pair.k)}
        if labels is not None:
            out["target_train_acc"] = accuracy(pred_train, labels)
            if state.pseudo_cols is not None:
                out["pseudo_label_acc"] = accuracy(state.pseudo_cols.reshape(-1), labels)
        if test is not None:
            out["target_test_acc"] = accuracy(predict(model, test.X), test.y)
        return out

    return evaluate


def train(config: TrainConfig, pair: DomainPair) -> RunResult:
    """Train on the labeled source and the unlabeled target-train split."""
    rng = np.random.default_rng(config.seed)
    task = ClassificationTask(pair.training_view(), config, rng)
    return run_training(task, config, rng, make_classification_evaluator(pair))


# -- gradient-reversal baseline -----------------------------------------------
def train_grl(config: TrainConfig, pair: DomainPair, disc_hidden: int = 32) -> RunResult:
    """Source cross-entropy plus a domain classifier behind gradient reversal;
    the reversal strength follows the same penalty schedule."""
    rng = np.random.default_rng(config.seed)
    task = ClassificationTask(pair.training_view(), config, rng)
    disc = MLP([config.d, disc_hidden, 1], rng, "relu")
    opt = SGD(parameters_of([task.phi, task.f, disc]), lr=config.lr0, momentum=config.momentum,
              weight_decay=config.weight_decay, clip_norm=config.grad_clip)
    sampler_rng = np.random.default_rng(rng.integers(2 ** 63))
    sampler_s = _CyclicSampler(task.n_source, sampler_rng, config.shuffle)
    sampler_t = _CyclicSampler(task.n_target, sampler_rng, config.shuffle)
    iters = config.iterations_per_epoch or math.ceil(max(task.n_source, task.n_target) / config.batch_size)
    bs, bt = min(config.batch_size, task.n_source), min(config.batch_size, task.n_target)
    model = TrainedModel(task, None, dataclasses.replace(config, use_genc=False), pair.k)
    evaluate = make_classification_evaluator(pair)
    state = LoopState()
    metrics = []
    domain = np.concatenate([np.ones(bs), np.zeros(bt)])
    for epoch in range(config.warmup_epochs + config.epochs):
        warm = epoch < config.warmup_epochs
        progress = 0.0 if warm else epoch_progress(epoch - config.warmup_epochs, config.epochs)
        coeff = 0.0 if warm else lambda_schedule(progress, config.lambda_gamma)
        opt.lr = config.lr0 if warm else lr_schedule(progress, config.lr0, config.lr_alpha, config.lr_gamma)
        sums = {"L_fphi_s": 0.0, "L_domain": 0.0}
        for _ in range(iters):
            batch = task.forward(sampler_s.next(bs), sampler_t.next(bt))
            ce = task.disc_source_loss(batch, None)
            feats = T.grad_reverse(T.concat([batch.Z_s, batch.Z_t], axis=1), coeff)
            prob = T.sigmoid(disc(feats)).reshape(-1)
            bce = -(T.mean(domain * T.log(prob) + (1.0 - domain) * T.log(1.0 - prob)))
            total = ce + bce
            _check_finite_loss(total.item(), "training loss", None)
            opt.zero_grad()
            backward(total)
            opt.step()
            sums["L_fphi_s"] += ce.item()
            sums["L_domain"] += bce.item()
        if warm:
            continue
        _, _, state.pseudo_cols = refresh_pseudo_labels(task, config, pair.k)
        _finalize_generative(model, task, None, config, 0)
        row = {"epoch": epoch - config.warmup_epochs + 1, "lambda": coeff, "lr": opt.lr}
        row.update({key: v / iters for key, v in sums.items()})
        row.update(_epoch_diagnostics(model, task, state, pair.k))
        row.update(evaluate(model, state))
        metrics.append(row)
    return RunResult(model, metrics, None, model.state_dict())


# -- model files ----------------------------------------------------------------
def save_model(model: TrainedModel, prefix, extra: Optional[dict] = None) -> List[Path]:
    """``<prefix>.npz`` holds parameters, centroids and target whitening;
    ``<prefix>.json`` holds the configuration and network shape."""
    prefix = Path(prefix)
    arrays = dict(model.state_dict())
    if model.centroids is not None:
        arrays["centroids"] = model.centroids
    if model.target_whitener is not None:
        arrays["whitener.mean"] = model.target_whitener.mean
        arrays["whitener.matrix"] = model.target_whitener.matrix
    npz = prefix.with_suffix(".npz")
    with open(npz, "wb") as fh:
        np.savez(fh, **arrays)
    meta = {"task": model.task.describe(), "config": model.config.to_mapping(),
            "has_learner": model.learner is not None}
    meta.update(extra or {})
    meta_path = prefix.with_suffix(".json")
    meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return [npz, meta_path]


def load_model(prefix) -> TrainedModel:
    prefix = Path(prefix)
    meta_path, npz = prefix.with_suffix(".json"), prefix.with_suffix(".npz")
    if not meta_path.exists() or not npz.exists():
        raise ContractError(f"model files {npz.name} / {meta_path.name} not found next to {prefix}")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    config = TrainConfig.from_mapping(meta["config"])
    desc = meta["task"]
    if desc["kind"] == "classification":
        task = ClassificationTask.for_inference(desc["dim"], desc["k"], config)
    elif desc["kind"] == "segmentation":
        from .segext import SegConfig, SegTask
        task = SegTask.for_inference(tuple(desc["shape"]), desc["k"], desc["a"], config,
                                     SegConfig(**desc.get("seg", meta.get("seg", {}))))
    else:
        raise ContractError(f"unknown model kind {desc['kind']!r}")
    learner = build_learner(config, desc["k"], np.random.default_rng(0)) if meta["has_learner"] else None
    model = TrainedModel(task, learner, config, desc["k"])
    with np.load(npz) as data:
        arrays = {key: data[key] for key in data.files}
    model.load_state_dict(arrays)
    model.centroids = arrays.get("centroids")
    if "whitener.mean" in arrays:
        w = Whitener.__new__(Whitener)
        w.mean, w.matrix = arrays["whitener.mean"], arrays["whitener.matrix"]
        model.target_whitener = w
    return model
