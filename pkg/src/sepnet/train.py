"""SGD training/fine-tuning, CIFAR-style preprocessing and the three-stage pipeline."""
from __future__ import annotations

import dataclasses
import glob
import logging
import os
from dataclasses import dataclass, field
from typing import Callable, TextIO

import numpy as np

from .compress import BLOCK_ROLES, binarize_network
from .graph import Network, UsageError, cross_entropy_softmax

log = logging.getLogger(__name__)


# ---------------------------------------------------------------- config


@dataclass
class TrainConfig:
    """Mini-batch SGD settings. Defaults are the CIFAR-10 recipe."""

    base_lr: float = 0.1
    schedule: str = "step"  # step | poly
    milestones: tuple[int, ...] = (32000, 48000)
    factor: float = 0.1
    power: float = 1.0
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 256
    max_iter: int = 64000
    seed: int = 0
    decay_groups: tuple[str, ...] = ("weight", "head")
    decay_alpha: bool = False
    finetune_lr_scale: float = 0.01
    finetune_iter: int | None = None
    log_every: int = 100

    def __post_init__(self):
        self.milestones = tuple(int(m) for m in self.milestones)
        self.decay_groups = tuple(self.decay_groups)
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.schedule not in ("step", "poly"):
            raise ValueError(f"unknown schedule {self.schedule!r}")

    def learning_rate(self, iteration: int) -> float:
        if self.schedule == "step":
            drops = sum(1 for m in self.milestones if iteration >= m)
            return self.base_lr * self.factor ** drops
        frac = min(iteration, self.max_iter) / self.max_iter
        return self.base_lr * (1.0 - frac) ** self.power

    def finetune(self) -> "TrainConfig":
        """Config for the fine-tuning stage: lr scaled down, same schedule shape."""
        iters = self.finetune_iter or self.max_iter
        scale = iters / self.max_iter
        return dataclasses.replace(
            self, base_lr=self.base_lr * self.finetune_lr_scale, max_iter=iters,
            milestones=tuple(int(m * scale) for m in self.milestones), finetune_iter=None)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def cifar_config(**overrides) -> TrainConfig:
    return TrainConfig(**overrides)


def desk_config(max_iter: int = 800, batch_size: int = 64, **overrides) -> TrainConfig:
    """CIFAR recipe shrunk proportionally (milestones at 1/2 and 3/4 of the run)."""
    kw = dict(max_iter=max_iter, batch_size=batch_size,
              milestones=(max_iter // 2, (3 * max_iter) // 4), log_every=50)
    kw.update(overrides)
    return TrainConfig(**kw)


# ------------------------------------------------------------- optimizer


def sgd_step(params: dict, grads: dict, state: dict, config: TrainConfig, iteration: int) -> float:
    """One momentum-SGD update, in place. Returns the learning rate used.

    ``v <- mu v - lr (g + lambda w); w <- w + v``. Frozen-pattern slots update
    only their scales; Q8 slots are never touched.
    """
    lr = config.learning_rate(iteration)
    for key, slot in params.items():
        if slot.encoding == "Q8":
            continue
        g = grads[key]
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
            raise FloatingPointError(
                f"non-finite gradient in {key} at iteration {iteration}: {bad} bad entries")
        w = slot.trainable_value()
        if slot.frozen_pattern:
            lam = config.weight_decay if config.decay_alpha else 0.0
        else:
            lam = config.weight_decay if slot.group in config.decay_groups else 0.0
        v = state.get(key)
        if v is None:
            v = np.zeros_like(w, dtype=np.float64 if w.dtype == np.float64 else w.dtype)
        v = config.momentum * v - lr * (g + lam * w)
        state[key] = v
        slot.set_trainable_value(w + v)
    return lr


# ---------------------------------------------------------- preprocessing


def gcn(images: np.ndarray, scale: float = 1.0, eps: float = 1e-8) -> np.ndarray:
    """Global contrast normalization per image: zero mean, L2 norm ``scale``."""
    x = np.asarray(images, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]
    flat = x.reshape(len(x), -1)
    flat = flat - flat.mean(axis=1, keepdims=True)
    norm = np.sqrt((flat ** 2).sum(axis=1, keepdims=True))
    # images with (numerically) no contrast map to zero instead of amplified round-off
    flat = np.where(norm > eps, scale * flat / np.maximum(norm, eps), 0.0)
    out = flat.reshape(x.shape).astype(np.float32 if images.dtype != np.float64 else np.float64)
    return out[0] if single else out


@dataclass
class ZCAWhitener:
    epsilon: float = 1e-2
    mean: np.ndarray | None = None
    matrix: np.ndarray | None = None

    def fit(self, images: np.ndarray) -> "ZCAWhitener":
        x = np.asarray(images, dtype=np.float64).reshape(len(images), -1)
        self.mean = x.mean(axis=0)
        xc = x - self.mean
        cov = xc.T @ xc / len(x)
        evals, evecs = np.linalg.eigh(cov)
        evals = np.clip(evals, 0.0, None)
        self.matrix = (evecs / np.sqrt(evals + self.epsilon)) @ evecs.T
        return self

    def apply(self, images: np.ndarray) -> np.ndarray:
        if self.matrix is None:
            raise UsageError("ZCA transform applied before fit")
        x = np.asarray(images)
        flat = x.reshape(-1, self.mean.size).astype(np.float64)
        out = (flat - self.mean) @ self.matrix
        return out.reshape(x.shape).astype(x.dtype if x.dtype.kind == "f" else np.float32)


def zca_fit(train_images: np.ndarray, epsilon: float = 1e-2) -> ZCAWhitener:
    return ZCAWhitener(epsilon).fit(train_images)


def zca_apply(transform: ZCAWhitener | None, images: np.ndarray) -> np.ndarray:
    if transform is None:
        raise UsageError("ZCA transform applied before fit")
    return transform.apply(images)


# ----------------------------------------------------------- augmentation


@dataclass
class AugmentSpec:
    pad_pixels: int = 4
    random_crop: bool = True
    mirror: bool = False

    def __post_init__(self):
        if self.pad_pixels < 0:
            raise ValueError("pad_pixels must be >= 0")


def pad_image(image: np.ndarray, pad: int) -> np.ndarray:
    width = [(0, 0)] * (image.ndim - 2) + [(pad, pad), (pad, pad)]
    return np.pad(image, width)


def crop(image: np.ndarray, top: int, left: int, h: int, w: int) -> np.ndarray:
    return image[..., top:top + h, left:left + w]


def augment(images: np.ndarray, spec: AugmentSpec, rng: np.random.Generator | None = None,
            train: bool = True) -> np.ndarray:
    """Zero-pad then take a random original-size crop (optionally mirror).

    ``train=False`` returns the images unchanged.
    """
    if not train or (not spec.random_crop and not spec.mirror):
        return images
    rng = np.random.default_rng() if rng is None else rng
    n, _, h, w = images.shape
    out = np.empty_like(images)
    p = spec.pad_pixels if spec.random_crop else 0
    padded = pad_image(images, p)
    tops = rng.integers(0, 2 * p + 1, size=n)
    lefts = rng.integers(0, 2 * p + 1, size=n)
    flips = rng.random(n) < 0.5 if spec.mirror else np.zeros(n, bool)
    for i in range(n):
        img = padded[i, :, tops[i]:tops[i] + h, lefts[i]:lefts[i] + w]
        out[i] = img[..., ::-1] if flips[i] else img
    return out


# ---------------------------------------------------------------- datasets


@dataclass
class Dataset:
    images: np.ndarray  # float32 NCHW
    labels: np.ndarray  # int64
    class_count: int = 10

    def __len__(self):
        return len(self.labels)

    def subset(self, n: int, seed: int = 0) -> "Dataset":
        """Class-balanced-ish random subset of ``n`` examples."""
        idx = np.random.default_rng(seed).permutation(len(self))[:n]
        return Dataset(self.images[idx], self.labels[idx], self.class_count)


@dataclass
class DataSplits:
    train: Dataset
    test: Dataset
    augment: AugmentSpec = field(default_factory=AugmentSpec)


def read_cifar10_batch(path) -> Dataset:
    """One CIFAR-10 binary batch: records of 1 label byte + 3072 pixel bytes."""
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size % 3073:
        raise ValueError(f"{path}: size {raw.size} is not a multiple of 3073")
    raw = raw.reshape(-1, 3073)
    labels = raw[:, 0].astype(np.int64)
    images = raw[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return Dataset(images, labels, 10)


def load_cifar10(directory, train_limit: int | None = None) -> tuple[Dataset, Dataset]:
    files = sorted(glob.glob(os.path.join(directory, "data_batch_*.bin")))
    test_file = os.path.join(directory, "test_batch.bin")
    if not files or not os.path.exists(test_file):
        raise FileNotFoundError(f"no CIFAR-10 binary batches under {directory}")
    parts = [read_cifar10_batch(f) for f in files]
    train = Dataset(np.concatenate([p.images for p in parts]), np.concatenate([p.labels for p in parts]))
    if train_limit:
        train = train.subset(train_limit)
    return train, read_cifar10_batch(test_file)


def save_npz_dataset(path, data: Dataset) -> None:
    np.savez(path, images=data.images, labels=data.labels, class_count=data.class_count)


def load_npz_dataset(path) -> Dataset:
    """Synthetic/raw sets: ``.npz`` with ``images`` (N,C,H,W) and ``labels``."""
    with np.load(path) as z:
        cc = int(z["class_count"]) if "class_count" in z else int(z["labels"].max()) + 1
        return Dataset(z["images"].astype(np.float32), z["labels"].astype(np.int64), cc)


def load_digits(size: int = 32, test_fraction: float = 0.3, seed: int = 0) -> tuple[Dataset, Dataset]:
    """scikit-learn's bundled 8x8 handwritten digits, upsampled to ``size``."""
    from scipy.ndimage import zoom
    from sklearn.datasets import load_digits as _digits

    d = _digits()
    imgs = d.images.astype(np.float64) / 16.0
    if size != 8:
        imgs = np.stack([zoom(im, size / 8, order=1) for im in imgs])
    imgs = imgs[:, None].astype(np.float32)
    labels = d.target.astype(np.int64)
    perm = np.random.default_rng(seed).permutation(len(labels))
    n_test = int(round(len(labels) * test_fraction))
    te, tr = perm[:n_test], perm[n_test:]
    return Dataset(imgs[tr], labels[tr], 10), Dataset(imgs[te], labels[te], 10)


def preprocess(train: Dataset, test: Dataset, use_gcn: bool = True, use_zca: bool = True,
               zca_epsilon: float = 1e-2) -> tuple[Dataset, Dataset]:
    """GCN (per-pixel RMS 1) then ZCA fitted on the training images only."""
    d = int(np.prod(train.images.shape[1:]))
    tr, te = train.images, test.images
    if use_gcn:
        tr, te = gcn(tr, scale=np.sqrt(d)), gcn(te, scale=np.sqrt(d))
    if use_zca:
        z = zca_fit(tr, zca_epsilon)
        tr, te = z.apply(tr), z.apply(te)
    return (Dataset(tr.astype(np.float32), train.labels, train.class_count),
            Dataset(te.astype(np.float32), test.labels, test.class_count))


# ------------------------------------------------------- train / evaluate


def topk_accuracy(logits: np.ndarray, labels: np.ndarray, k: int) -> float:
    k = min(k, logits.shape[1])
    top = np.argsort(-logits, axis=1, kind="stable")[:, :k]
    return float(np.mean(np.any(top == labels[:, None], axis=1)))


def evaluate(net: Network, data: Dataset, batch_size: int = 256) -> dict[str, float]:
    logits = net.predict(data.images, batch_size)
    return {"top1": topk_accuracy(logits, data.labels, 1), "top5": topk_accuracy(logits, data.labels, 5)}


def train(net: Network, data: Dataset, config: TrainConfig, augment_spec: AugmentSpec | None = None,
          log_file: TextIO | None = None, on_step: Callable | None = None) -> list[dict]:
    """Run ``config.max_iter`` SGD iterations in place; returns the per-iteration history.

    Log lines are tab separated: iter, lr, loss, top1, top5 (batch accuracy).
    """
    rng = np.random.default_rng(config.seed)
    state: dict = {}
    history = []
    order = rng.permutation(len(data))
    pos = 0
    for it in range(config.max_iter):
        if pos + config.batch_size > len(order):
            order, pos = rng.permutation(len(data)), 0
        idx = order[pos:pos + config.batch_size]
        pos += config.batch_size
        x = data.images[idx]
        if augment_spec is not None:
            x = augment(x, augment_spec, rng)
        y = data.labels[idx]
        logits = net.forward(x, train=True)
        loss, g = cross_entropy_softmax(logits, y)
        if not np.isfinite(loss):
            raise FloatingPointError(f"loss became {loss} at iteration {it}")
        grads = net.backward(g)
        lr = sgd_step(net.params, grads, state, config, it)
        rec = {"iter": it, "lr": lr, "loss": loss,
               "top1": topk_accuracy(logits, y, 1), "top5": topk_accuracy(logits, y, 5)}
        history.append(rec)
        if log_file is not None and (it % config.log_every == 0 or it == config.max_iter - 1):
            log_file.write(f"{it}\t{lr:.6g}\t{loss:.6f}\t{rec['top1']:.4f}\t{rec['top5']:.4f}\n")
            log_file.flush()
        if on_step is not None:
            on_step(rec)
    net._cache = None
    return history


# ---------------------------------------------------------------- pipeline

STAGES = ("full-train", "binarize", "finetune")
_REQUIRED_STATE = {"full-train": ("Full",), "binarize": ("Full",), "finetune": ("BiPattern", "Refined")}


@dataclass
class StageResult:
    net: Network
    metrics: dict[str, float]
    history: list[dict] = field(default_factory=list)


def run_pipeline(net: Network, data: DataSplits, config: TrainConfig, stage: str,
                 scope="k>1", roles=BLOCK_ROLES, granularity: str = "filter",
                 checkpoint_dir=None, log_file: TextIO | None = None) -> StageResult:
    """Apply one stage of train -> binarize -> fine-tune and evaluate the result.

    The returned network carries the state tag ``Full``, ``BiPattern`` or
    ``Refined``; with ``checkpoint_dir`` it is also saved as ``<state>.sepn``.
    """
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}; expected one of {STAGES}")
    if net.state not in _REQUIRED_STATE[stage]:
        raise UsageError(f"stage {stage!r} needs a model in state {_REQUIRED_STATE[stage]}, got {net.state!r}")
    history: list[dict] = []
    if stage == "full-train":
        out = net.copy()
        history = train(out, data.train, config, data.augment, log_file)
        out.state = "Full"
    elif stage == "binarize":
        out, report = binarize_network(net, scope, roles, granularity)
        log.info("binarized %d layers", len(report))
    else:
        out = net.copy()
        history = train(out, data.train, config.finetune(), data.augment, log_file)
        out.state = "Refined"
    metrics = evaluate(out, data.test)
    log.info("%s: top1=%.4f top5=%.4f", out.state, metrics["top1"], metrics["top5"])
    if checkpoint_dir is not None:
        from .store import save

        os.makedirs(checkpoint_dir, exist_ok=True)
        save(out, os.path.join(checkpoint_dir, f"{out.state}.sepn"))
    return StageResult(out, metrics, history)
