"""Per-pixel adaptation for semantic segmentation on toy scenes.

Feature maps are computed at ``1/a`` resolution; each map location is one
feature column for clustering.  Classifier logits are upsampled back to
full resolution, so discriminative terms act on pixels while generative
terms act on subsampled locations, with source targets given by the class
counts of each ``a x a`` field.  A small discriminator on self-information
maps adds an adversarial layout-consistency game.
"""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import objectives as obj
from .errors import ContractError
from .evalkit import accuracy, iou_per_class
from .gradcore import tensor as T
from .gradcore.nn import Conv2d, Module, frozen
from .gradcore.optim import Adam
from .gradcore.tensor import Tensor, backward, no_grad
from .trainer import Batch, LoopState, RunResult, TrainConfig, TrainedModel, run_training

log = logging.getLogger(__name__)

SCENE_MAGIC = "HSRDC-SCENES 1"


# -- scenes -----------------------------------------------------------------
@dataclass
class SegScene:
    """One image (h x w x c) with optional labels (h x w, 1-based)."""

    image: np.ndarray
    labels: Optional[np.ndarray]
    a: int

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=float)
        if self.image.ndim != 3:
            raise ContractError("scene image must be h x w x channels")
        h, w, _ = self.image.shape
        _check_ratio(h, w, self.a)
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (h, w):
                raise ContractError("label grid must match the image size")


def _check_ratio(h: int, w: int, a: int) -> None:
    if a < 1:
        raise ContractError("subsampling ratio must be >= 1")
    if h % a or w % a:
        raise ContractError(f"scene size {h}x{w} not divisible by subsampling ratio {a}")


@dataclass
class SceneSet:
    """A stack of equally sized scenes: images n x h x w x c, labels n x h x w."""

    images: np.ndarray
    labels: Optional[np.ndarray]
    k: int
    a: int

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=float)
        if self.images.ndim != 4:
            raise ContractError("scene images must be n x h x w x c")
        _check_ratio(self.images.shape[1], self.images.shape[2], self.a)
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != self.images.shape[:3]:
                raise ContractError("label grids must match the images")
            obj.check_labels(self.labels.reshape(-1), self.k)

    def __len__(self) -> int:
        return self.images.shape[0]

    def __getitem__(self, i: int) -> SegScene:
        return SegScene(self.images[i], None if self.labels is None else self.labels[i], self.a)

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.images.shape[1:]


@dataclass
class SegDomainPair:
    source: SceneSet
    target_train: SceneSet
    target_test: SceneSet
    source_test: SceneSet
    metadata: dict = field(default_factory=dict)

    @property
    def k(self) -> int:
        return self.source.k


# -- per-pixel objectives -----------------------------------------------------
def class_count_field(labels, a: int, k: int) -> np.ndarray:
    """Class counts in every ``a x a`` field: (h/a) x (w/a) x K, summing to a^2."""
    labels = np.asarray(labels)
    if labels.ndim < 2:
        raise ContractError("label grid must be at least 2-D")
    h, w = labels.shape[-2:]
    _check_ratio(h, w, a)
    obj.check_labels(labels.reshape(-1).astype(np.int64), k)
    lead = labels.shape[:-2]
    blocks = labels.reshape(*lead, h // a, a, w // a, a)
    onehot = (blocks[..., None] == np.arange(1, k + 1))
    return onehot.sum(axis=(-4, -2)).astype(float)


def seg_generative_source_loss(Ptilde_s: Tensor, tau: np.ndarray, a: int, weights=None) -> Tensor:
    """``-(1/m) sum_j w_j sum_k (tau_jk / a^2) log p~_jk`` over m feature locations.

    ``tau`` may be given per location (m x K) or as stacked fields.
    """
    Ptilde_s = T.as_tensor(Ptilde_s)
    k = Ptilde_s.shape[1]
    tau = np.asarray(tau, dtype=float).reshape(-1, k)
    if tau.shape != Ptilde_s.shape:
        raise ContractError(f"class-count fields {tau.shape} do not match assignments {Ptilde_s.shape}")
    m = tau.shape[0]
    target = tau / float(a * a)
    if weights is not None:
        w = np.asarray(weights, dtype=float)
        if w.shape != (m,):
            raise ContractError("one weight per feature location required")
        target = target * w[:, None]
    return -(T.tsum(T.mul(target, T.log(Ptilde_s))) / m)


def self_information(P) -> np.ndarray:
    """Entrywise ``-p log p`` with ``0 log 0 = 0``."""
    P = np.asarray(P.data if isinstance(P, Tensor) else P, dtype=float)
    if np.any(P < 0) or np.any(P > 1 + 1e-12):
        raise ContractError("self_information needs probabilities in [0, 1]")
    return -obj._xlogx(P)


def self_information_t(P: Tensor) -> Tensor:
    """Differentiable ``-p log p`` for the generator side of the layout game."""
    return -(P * T.log(P))


class LayoutDiscriminator(Module):
    """Three strided convolutions, global average, sigmoid: K x h x w -> (0, 1)."""

    def __init__(self, k: int, rng: np.random.Generator, width: int = 8):
        self.conv1 = Conv2d(k, width, 3, rng, stride=2, padding=1)
        self.conv2 = Conv2d(width, 2 * width, 3, rng, stride=2, padding=1)
        self.conv3 = Conv2d(2 * width, 1, 3, rng, stride=2, padding=1)

    def forward(self, maps) -> Tensor:
        x = T.relu(self.conv1(T.as_tensor(maps)))
        x = T.relu(self.conv2(x))
        x = self.conv3(x)
        pooled = T.mean(x, axis=(1, 2, 3))
        return T.sigmoid(pooled)


def layout_losses(O_s, O_t, g: LayoutDiscriminator) -> Tuple[Tensor, Tensor]:
    """(generator loss, discriminator loss) on batches of N x K x h x w maps.

    The generator loss treats ``g`` as fixed; the discriminator loss treats
    both maps as constants.
    """
    with frozen(g):
        gen = -T.mean(T.log(g(O_t)))
    Os = O_s.detach() if isinstance(O_s, Tensor) else Tensor(O_s)
    Ot = O_t.detach() if isinstance(O_t, Tensor) else Tensor(O_t)
    adv = -T.mean(T.log(g(Os))) - T.mean(T.log(1.0 - g(Ot)))
    return gen, adv


# -- network and task -----------------------------------------------------------
@dataclass
class SegConfig:
    beta: float = 0.001
    kernel: int = 3
    channels: int = 16
    disc_width: int = 8
    disc_lr: float = 1e-4
    oracle: bool = False

    def __post_init__(self):
        if self.beta < 0:
            raise ContractError("beta must be nonnegative")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ContractError("kernel size must be a positive odd integer")


class SegFeatures(Module):
    """Three convolutions; the middle one strides by the subsampling ratio."""

    def __init__(self, c_in: int, width: int, d: int, kernel: int, a: int, rng):
        pad = kernel // 2
        self.conv1 = Conv2d(c_in, width, kernel, rng, 1, pad)
        self.conv2 = Conv2d(width, width, kernel, rng, a, pad)
        self.conv3 = Conv2d(width, d, kernel, rng, 1, pad)

    def forward(self, x) -> Tensor:
        x = T.relu(self.conv1(x))
        x = T.relu(self.conv2(x))
        return T.relu(self.conv3(x))


class SegClassifier(Module):
    """1x1 convolution to K logit maps, bilinear upsampling by ``a``."""

    def __init__(self, d: int, k: int, a: int, rng):
        self.conv = Conv2d(d, k, 1, rng)
        self.a = a

    def logits(self, feats) -> Tensor:
        return self.conv(feats)

    def forward(self, feats) -> Tensor:
        return T.softmax(T.upsample_bilinear(self.logits(feats), self.a), axis=1)


def _maps_to_rows(maps: Tensor) -> Tensor:
    """N x K x h x w -> (N h w) x K, rows ordered image, row, column."""
    n, k, h, w = maps.shape
    return T.reshape(T.transpose(maps, (0, 2, 3, 1)), (n * h * w, k))


def _maps_to_cols(maps: Tensor) -> Tensor:
    """N x d x h x w -> d x (N h w) with the same location order as the rows."""
    n, d, h, w = maps.shape
    return T.reshape(T.transpose(maps, (1, 0, 2, 3)), (d, n * h * w))


def _nchw(images: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(images.transpose(0, 3, 1, 2))


class SegTask:
    """Per-pixel task plugged into the generic training loop."""

    uses_soft_selection = False

    def __init__(self, source: SceneSet, target: SceneSet, config: TrainConfig, seg: SegConfig,
                 rng: np.random.Generator):
        if source.shape != target.shape or source.a != target.a or source.k != target.k:
            raise ContractError("source and target scenes differ in size, channels, K or ratio")
        if source.labels is None:
            raise ContractError("source scenes must be labeled")
        self.k, self.a = source.k, source.a
        self.seg = seg
        h, w, c = source.shape
        self.h, self.w = h, w
        self.cols_per_unit = (h // self.a) * (w // self.a)
        self.rows_per_unit = h * w
        self.Xs = _nchw(source.images)
        self.ys = source.labels
        self.Xt = _nchw(target.images)
        self.tau_s = class_count_field(self.ys, self.a, self.k).reshape(
            len(source), self.cols_per_unit, self.k)
        self.phi = SegFeatures(c, seg.channels, config.d, seg.kernel, self.a, rng)
        self.f = SegClassifier(config.d, self.k, self.a, rng)
        self.g: Optional[LayoutDiscriminator] = None
        self.opt_g: Optional[Adam] = None
        if seg.beta > 0:
            self.g = LayoutDiscriminator(self.k, rng, seg.disc_width)
            self.opt_g = Adam(self.g.parameters(), lr=seg.disc_lr)

    n_source = property(lambda self: self.Xs.shape[0])
    n_target = property(lambda self: self.Xt.shape[0])
    feature_modules = property(lambda self: [self.phi])
    classifier_modules = property(lambda self: [self.f])

    def forward(self, idx_s, idx_t) -> Batch:
        Fs = self.phi(Tensor(self.Xs[idx_s]))
        Ft = self.phi(Tensor(self.Xt[idx_t]))
        Ms, Mt = self.f(Fs), self.f(Ft)
        return Batch(idx_s, idx_t, _maps_to_cols(Fs), _maps_to_cols(Ft), _maps_to_rows(Ms),
                     _maps_to_rows(Mt), {"maps_s": Ms, "maps_t": Mt})

    def rows_from_cols(self, col_labels: np.ndarray) -> np.ndarray:
        ha, wa = self.h // self.a, self.w // self.a
        grid = col_labels.reshape(-1, ha, wa)
        return np.repeat(np.repeat(grid, self.a, axis=1), self.a, axis=2).reshape(-1)

    def disc_source_loss(self, batch: Batch, weights) -> Tensor:
        return obj.weighted_source_ce(batch.P_s, self.ys[batch.idx_s].reshape(-1), weights)

    def gen_source_loss(self, Ptilde_s: Tensor, batch: Batch, weights) -> Tensor:
        return seg_generative_source_loss(Ptilde_s, self.tau_s[batch.idx_s], self.a, weights)

    def embed(self, X: np.ndarray, chunk: int = 16):
        """Feature columns and feature-resolution probabilities for NCHW images."""
        zs, ps = [], []
        with no_grad():
            for start in range(0, X.shape[0], chunk):
                F = self.phi(Tensor(X[start:start + chunk]))
                zs.append(_maps_to_cols(F).data)
                ps.append(_maps_to_rows(T.softmax(self.f.logits(F), axis=1)).data)
        return np.concatenate(zs, axis=1), np.concatenate(ps, axis=0)

    def embed_source(self):
        return self.embed(self.Xs)

    def embed_target(self):
        return self.embed(self.Xt)

    def source_labels_per_col(self) -> np.ndarray:
        # majority class of each field, ties to the lowest index
        return np.argmax(self.tau_s.reshape(-1, self.k), axis=1) + 1

    @classmethod
    def for_inference(cls, shape, k: int, a: int, config: TrainConfig, seg: SegConfig) -> "SegTask":
        h, w, c = shape
        empty = SceneSet(np.empty((0, h, w, c)), np.empty((0, h, w), dtype=np.int64), k, a)
        return cls(empty, empty, config, seg, np.random.default_rng(0))

    def describe(self) -> dict:
        return {"kind": "segmentation", "shape": [self.h, self.w, int(self.Xs.shape[1])],
                "k": self.k, "a": self.a, "seg": dataclasses.asdict(self.seg)}

    def predict_maps(self, X: np.ndarray, chunk: int = 16) -> np.ndarray:
        out = []
        with no_grad():
            for start in range(0, X.shape[0], chunk):
                out.append(self.f(self.phi(Tensor(X[start:start + chunk]))).data)
        return np.concatenate(out, axis=0)

    def extra_generator_loss(self, batch: Batch, state: LoopState) -> Optional[Tensor]:
        if self.g is None:
            return None
        with frozen(self.g):
            gen = -T.mean(T.log(self.g(self_information_t(batch.extras["maps_t"]))))
        return self.seg.beta * gen

    def after_step(self, batch: Batch, state: LoopState) -> Dict[str, float]:
        if self.g is None:
            return {}
        O_s = Tensor(self_information(batch.extras["maps_s"].data))
        O_t = Tensor(self_information(batch.extras["maps_t"].data))
        adv = -T.mean(T.log(self.g(O_s))) - T.mean(T.log(1.0 - self.g(O_t)))
        self.opt_g.zero_grad()
        backward(self.seg.beta * adv, self.g.parameters())
        self.opt_g.step()
        return {"L_adv": adv.item()}


# -- inference and evaluation ---------------------------------------------------
def infer_seg(model: TrainedModel, scenes: SceneSet) -> np.ndarray:
    """Per-pixel argmax label grids (n x h x w), 1-based, ties to the lowest class."""
    maps = model.task.predict_maps(_nchw(scenes.images))
    return np.argmax(maps, axis=1) + 1


def discriminator_accuracy(task: SegTask, source: SceneSet, target: SceneSet) -> float:
    """Fraction of held-out maps classified correctly (g > 1/2 means source)."""
    if task.g is None:
        return float("nan")
    with no_grad():
        gs = task.g(Tensor(self_information(task.predict_maps(_nchw(source.images))))).data
        gt = task.g(Tensor(self_information(task.predict_maps(_nchw(target.images))))).data
    return float((np.count_nonzero(gs > 0.5) + np.count_nonzero(gt <= 0.5)) / (gs.size + gt.size))


def seg_scores(model: TrainedModel, scenes: SceneSet) -> Dict[str, float]:
    pred = infer_seg(model, scenes)
    ious, miou = iou_per_class(pred, scenes.labels, scenes.k)
    out = {"miou": miou, "pixel_acc": accuracy(pred, scenes.labels)}
    out.update({f"iou_{c + 1}": v for c, v in enumerate(ious)})
    return out


def make_seg_evaluator(pair: SegDomainPair):
    def evaluate(model: TrainedModel, state: LoopState) -> Dict[str, float]:
        test = seg_scores(model, pair.target_test)
        train = seg_scores(model, pair.target_train)
        out = {"target_train_acc": train["pixel_acc"], "target_train_miou": train["miou"],
               "target_test_acc": test["pixel_acc"], "target_test_miou": test["miou"]}
        out.update({f"target_test_{k}": v for k, v in test.items() if k.startswith("iou_")})
        out["disc_acc"] = discriminator_accuracy(model.task, pair.source_test, pair.target_test)
        return out
    return evaluate


def seg_train_config(**overrides) -> TrainConfig:
    """Loop defaults for segmentation: fixed lambda = 0.001 on the target
    terms and no soft selection."""
    base = dict(lambda_mode="fixed", lambda_fixed=0.001, lambda_on="target",
                use_soft_selection=False, batch_size=4, d=16)
    base.update(overrides)
    return TrainConfig(**base)


def train_seg(config: TrainConfig, seg: SegConfig, pair: SegDomainPair) -> RunResult:
    """Generator step (clustering terms + beta * layout) then discriminator step per batch.

    With ``seg.oracle`` the target-train scenes replace the source, giving
    a target-supervised reference.
    """
    if config.use_soft_selection:
        log.warning("soft selection is not used for segmentation; forcing source weights to 1")
        config = TrainConfig(**{**config.to_mapping(), "use_soft_selection": False})
    rng = np.random.default_rng(config.seed)
    source = pair.source
    if seg.oracle:
        source = SceneSet(pair.target_train.images, pair.target_train.labels, pair.k, pair.source.a)
    task = SegTask(source, pair.target_train, config, seg, rng)
    return run_training(task, config, rng, make_seg_evaluator(pair))


# -- toy scene generator --------------------------------------------------------
SOURCE_PALETTE = np.array([[0.25, 0.45, 0.90],   # sky
                           [0.45, 0.35, 0.15],   # ground
                           [0.85, 0.20, 0.20]])  # objects


def _layout(rng, h: int, w: int) -> np.ndarray:
    labels = np.empty((h, w), dtype=np.int64)
    horizon = int(rng.integers(h // 3, 2 * h // 3 + 1))
    labels[:horizon] = 1
    labels[horizon:] = 2
    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(int(rng.integers(1, 4))):
        r = rng.uniform(h / 10, h / 5)
        cy = rng.uniform(horizon - r / 2, h - r / 2)
        cx = rng.uniform(r, w - r)
        labels[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = 3
    return labels


def _texture(rng, labels: np.ndarray, palette: np.ndarray, noise: float, gain: np.ndarray,
             offset: np.ndarray) -> np.ndarray:
    base = palette[labels - 1]
    grain = noise * rng.standard_normal(base.shape)
    return base * gain + offset + grain


def gen_scenes(n: int, seed: int, size: int = 32, a: int = 2, target: bool = False,
               shift: float = 1.0) -> SceneSet:
    """Sky band over ground with object blobs.  Target scenes share the
    layout model; their textures are re-coloured and noisier (``shift``
    scales the change, 0 gives the source texture model)."""
    rng = np.random.default_rng(seed)
    gain = np.ones(3)
    offset = np.zeros(3)
    noise = 0.12
    if target:
        gain = 1.0 + shift * np.array([-0.45, 0.35, 0.30])
        offset = shift * np.array([0.30, -0.05, -0.20])
        noise = 0.12 + 0.08 * shift
    labels = np.stack([_layout(rng, size, size) for _ in range(n)])
    images = np.stack([_texture(rng, lab, SOURCE_PALETTE, noise, gain, offset) for lab in labels])
    return SceneSet(images, labels, 3, a)


def toy_scene_pair(n_source: int = 40, n_target: int = 40, n_test: int = 20, seed: int = 0,
                   size: int = 32, a: int = 2, shift: float = 1.0) -> SegDomainPair:
    seeds = np.random.SeedSequence(seed).generate_state(4)
    meta = {"generator": "toy_scenes", "size": size, "a": a, "shift": shift, "seed": seed}
    return SegDomainPair(
        source=gen_scenes(n_source, int(seeds[0]), size, a),
        target_train=gen_scenes(n_target, int(seeds[1]), size, a, True, shift),
        target_test=gen_scenes(n_test, int(seeds[2]), size, a, True, shift),
        source_test=gen_scenes(n_test, int(seeds[3]), size, a),
        metadata=meta)


# -- binary scene files -------------------------------------------------------
def save_scenes(path, scenes: SceneSet) -> None:
    """Text header lines ending in ``END``, then little-endian float64 images
    (n*h*w*c values) and, when labeled, int32 label grids (n*h*w values)."""
    n, h, w, c = scenes.images.shape
    labeled = scenes.labels is not None
    header = (f"{SCENE_MAGIC}\nn={n} h={h} w={w} c={c} k={scenes.k} a={scenes.a} "
              f"labels={int(labeled)}\nEND\n")
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(scenes.images.astype("<f8").tobytes())
        if labeled:
            fh.write(scenes.labels.astype("<i4").tobytes())


def save_label_grids(path, grids: np.ndarray, k: int, a: int) -> None:
    """Prediction export: label grids in the scene format with zero channels."""
    grids = np.asarray(grids, dtype=np.int64)
    n, h, w = grids.shape
    header = f"{SCENE_MAGIC}\nn={n} h={h} w={w} c=0 k={k} a={a} labels=1\nEND\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(grids.astype("<i4").tobytes())


def load_scenes(path):
    """Read a scene file; label-only files (c=0) return the label grids."""
    raw = Path(path).read_bytes()
    end = raw.find(b"\nEND\n")
    if not raw.startswith(SCENE_MAGIC.encode()) or end < 0:
        raise ContractError(f"{path}: not a scene file")
    fields = {}
    for tok in raw[len(SCENE_MAGIC) + 1:end].decode("ascii").split():
        key, _, val = tok.partition("=")
        fields[key] = int(val)
    try:
        n, h, w, c, k, a, labeled = (fields[x] for x in ("n", "h", "w", "c", "k", "a", "labels"))
    except KeyError as exc:
        raise ContractError(f"{path}: header missing {exc.args[0]}") from None
    body = raw[end + 5:]
    n_img = n * h * w * c * 8
    n_lab = n * h * w * 4 if labeled else 0
    if len(body) != n_img + n_lab:
        raise ContractError(f"{path}: expected {n_img + n_lab} payload bytes, found {len(body)}")
    labels = np.frombuffer(body[n_img:], dtype="<i4").reshape(n, h, w).astype(np.int64) if labeled else None
    if c == 0:
        return labels
    images = np.frombuffer(body[:n_img], dtype="<f8").reshape(n, h, w, c).copy()
    return SceneSet(images, labels, k, a)
