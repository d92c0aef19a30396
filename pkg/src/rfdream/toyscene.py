"""Procedural "sky over ground" scenes whose class depends on shape and height.

Every image has a vertical colour gradient split at a random horizon row and
one object.  The class fixes the object's shape and the vertical band its
centre lies in, so a classifier has to combine what the object is with where
it is.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from . import container
from .exceptions import FormatError, NonFiniteError, ParameterError
from .netgraph import ModelGraph, loss_and_grads, predict_logits, sgd_step
from .tensor import SplitMix64, derive_seed, randn_tensor

log = logging.getLogger(__name__)

SHAPES = ("disc", "square", "bar")

PALETTE = np.array([
    [0.90, 0.10, 0.10],
    [0.95, 0.85, 0.10],
    [0.05, 0.05, 0.05],
    [0.97, 0.97, 0.97],
    [0.80, 0.20, 0.80],
], dtype=np.float32)

SKY_TOP = np.array([0.35, 0.55, 0.85], np.float32)
SKY_BOTTOM = np.array([0.70, 0.80, 0.95], np.float32)
GROUND_TOP = np.array([0.45, 0.40, 0.25], np.float32)
GROUND_BOTTOM = np.array([0.25, 0.35, 0.15], np.float32)


@dataclass(frozen=True)
class ClassRule:
    shape: str
    band: tuple  # rows [lo, hi) holding the object centre


DEFAULT_RULES = (
    ClassRule("disc", (8, 24)),
    ClassRule("square", (24, 40)),
    ClassRule("bar", (40, 56)),
    ClassRule("disc", (40, 56)),
)


@dataclass(frozen=True)
class SceneSpec:
    height: int = 64
    width: int = 64
    rules: tuple = DEFAULT_RULES
    horizon: tuple = (24, 40)
    radius: tuple = (4, 8)
    columns: tuple = (12, 52)
    noise_std: float = 0.02

    def __post_init__(self):
        for rule in self.rules:
            if rule.shape not in SHAPES:
                raise ParameterError(f"unknown shape {rule.shape!r}")
            lo, hi = rule.band
            if not 0 <= lo < hi <= self.height:
                raise ParameterError(f"band {rule.band} outside image rows")
        if self.noise_std < 0:
            raise ParameterError("noise_std must be >= 0")

    @property
    def num_classes(self) -> int:
        return len(self.rules)

    def to_dict(self) -> dict:
        return asdict(self)


class Layout(NamedTuple):
    label: int
    horizon: int
    row: int
    col: int
    radius: int
    color: int


def _between(rng: SplitMix64, lo: int, hi: int) -> int:
    return lo + rng.below(hi - lo)


def sample_layout(rng: SplitMix64, label: int, spec: SceneSpec) -> Layout:
    if not 0 <= label < spec.num_classes:
        raise ParameterError(f"class {label} out of range 0..{spec.num_classes - 1}")
    rule = spec.rules[label]
    return Layout(
        label=label,
        horizon=_between(rng, *spec.horizon),
        row=_between(rng, *rule.band),
        col=_between(rng, *spec.columns),
        radius=_between(rng, *spec.radius),
        color=rng.below(len(PALETTE)),
    )


def render(layout: Layout, spec: SceneSpec) -> np.ndarray:
    """Noise-free ``(1, 3, H, W)`` image of a layout."""
    h, w = spec.height, spec.width
    rows = np.arange(h, dtype=np.float32)[:, None]
    cols = np.arange(w, dtype=np.float32)[None, :]
    sky_t = (rows / max(layout.horizon - 1, 1))[..., None]
    ground_t = ((rows - layout.horizon) / max(h - layout.horizon - 1, 1))[..., None]
    sky = SKY_TOP + (SKY_BOTTOM - SKY_TOP) * sky_t
    ground = GROUND_TOP + (GROUND_BOTTOM - GROUND_TOP) * ground_t
    img = np.where((rows < layout.horizon)[..., None], sky, ground)
    img = np.broadcast_to(img, (h, w, 3)).copy()

    dr, dc, r = rows - layout.row, cols - layout.col, layout.radius
    shape = spec.rules[layout.label].shape
    if shape == "disc":
        mask = dr * dr + dc * dc <= r * r
    elif shape == "square":
        mask = (np.abs(dr) <= r) & (np.abs(dc) <= r)
    else:
        mask = (np.abs(dr) <= max(1, r // 3)) & (np.abs(dc) <= 2 * r)
    img[mask] = PALETTE[layout.color]
    return img.transpose(2, 0, 1)[None].astype(np.float32)


def gen_scene(rng: SplitMix64, label: int, spec: SceneSpec | None = None):
    """Sample and render one scene; returns ``(image, label)``."""
    spec = spec or SceneSpec()
    layout = sample_layout(rng, label, spec)
    img = render(layout, spec)
    if spec.noise_std > 0:
        img = img + randn_tensor(rng, img.shape, 0.0, spec.noise_std)
    return np.clip(img, 0.0, 1.0).astype(np.float32), label


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    n_train: int
    seed: int = 0
    spec: SceneSpec = field(default_factory=SceneSpec)

    @property
    def train(self):
        return self.images[:self.n_train], self.labels[:self.n_train]

    @property
    def val(self):
        return self.images[self.n_train:], self.labels[self.n_train:]

    def __len__(self):
        return len(self.labels)


def gen_dataset(seed: int, n_per_class: int, spec: SceneSpec | None = None,
                val_fraction: float = 0.1) -> Dataset:
    """Balanced dataset, shuffled by a seeded permutation, split train/val.

    Sample ``j`` of class ``c`` is drawn from its own stream
    ``derive_seed(seed, c * n_per_class + j)``.
    """
    spec = spec or SceneSpec()
    if n_per_class < 1:
        raise ParameterError(f"n_per_class must be >= 1, got {n_per_class}")
    total = n_per_class * spec.num_classes
    images = np.empty((total, 3, spec.height, spec.width), np.float32)
    labels = np.empty(total, np.int64)
    for idx in range(total):
        label = idx // n_per_class
        images[idx], labels[idx] = gen_scene(SplitMix64(derive_seed(seed, idx)), label, spec)[0][0], label
    perm = SplitMix64(derive_seed(seed, total)).permutation(total)
    n_train = total - int(round(val_fraction * total))
    return Dataset(images[perm], labels[perm], n_train, seed, spec)


def save_dataset(ds: Dataset, path) -> None:
    header = {"format": "dataset", "seed": ds.seed, "n_train": ds.n_train, "spec": ds.spec.to_dict()}
    container.write(path, header, {"images": ds.images, "labels": ds.labels.astype(np.float32)})


def load_dataset(path) -> Dataset:
    meta, tensors = container.read(path)
    if meta.get("format") != "dataset":
        raise FormatError("container does not hold a dataset")
    spec_d = dict(meta["spec"])
    spec_d["rules"] = tuple(ClassRule(r["shape"], tuple(r["band"])) for r in spec_d["rules"])
    for key in ("horizon", "radius", "columns"):
        spec_d[key] = tuple(spec_d[key])
    return Dataset(tensors["images"], tensors["labels"].astype(np.int64), int(meta["n_train"]),
                   int(meta["seed"]), SceneSpec(**spec_d))


def accuracy(model: ModelGraph, images, labels) -> float:
    if len(labels) == 0:
        return float("nan")
    pred = predict_logits(model, images).argmax(axis=1)
    return float(np.mean(pred == np.asarray(labels)))


@dataclass
class TrainResult:
    model: ModelGraph
    loss_curve: list
    val_accuracy: float


def sgd_train(model: ModelGraph, x, y, epochs: int, lr: float, seed: int = 0,
              batch_size: int = 32) -> tuple[ModelGraph, list]:
    """Minibatch SGD on softmax cross-entropy over ``(x, y)``.

    Returns the trained model and a loss curve that starts with the mean loss
    of the initial model, followed by the mean minibatch loss of each epoch.
    The minibatch order of every epoch is a splitmix64 permutation seeded by
    ``seed``.
    """
    if epochs < 1:
        raise ParameterError(f"epochs must be >= 1, got {epochs}")
    if not lr > 0:
        raise ParameterError(f"learning rate must be positive, got {lr}")
    if batch_size < 1:
        raise ParameterError(f"batch_size must be >= 1, got {batch_size}")
    rng = SplitMix64(seed)
    curve = [_mean_loss(model, x, y, batch_size)]
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(y))
        total = 0.0
        for start in range(0, len(y), batch_size):
            idx = np.sort(order[start:start + batch_size])
            try:
                loss, grads = loss_and_grads(model, x[idx], y[idx])
                if not np.isfinite(loss):
                    raise NonFiniteError("loss is not finite")
                model = sgd_step(model, grads, lr)
            except NonFiniteError as exc:
                raise NonFiniteError(f"training diverged in epoch {epoch}: {exc}") from None
            total += loss * len(idx)
        curve.append(total / len(y))
        log.info("epoch %d loss %.4f", epoch, curve[-1])
    return model, curve


def train_toy(model: ModelGraph, dataset: Dataset, epochs: int, lr: float, seed: int = 0,
              batch_size: int = 32) -> TrainResult:
    """Train on the dataset's training split and score the validation split."""
    x, y = dataset.train
    model, curve = sgd_train(model, x, y, epochs, lr, seed, batch_size)
    val_x, val_y = dataset.val
    return TrainResult(model, curve, accuracy(model, val_x, val_y))


def _mean_loss(model, x, y, batch_size):
    total = 0.0
    for start in range(0, len(y), batch_size * 4):
        sl = slice(start, start + batch_size * 4)
        logits = predict_logits(model, x[sl]).astype(np.float64)
        z = logits - logits.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        total -= logp[np.arange(len(y[sl])), y[sl]].sum()
    return float(total / max(len(y), 1))
