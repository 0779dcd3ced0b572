"""Datasets, model zoos and a small SGD trainer for building zoos locally."""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from ._parallel import ordered_map
from .nn import (Conv2d, Dense, Dropout, Flatten, MaxPool2d, Model, Relu, Softmax, forward_batch,
                 loss_and_gradients, round_to_f32, save_model)
from .rng import RngStream
from .tensor import check_image_batch

FORMAT_VERSION = 1
CIFAR_SIDE = 32
CIFAR_RECORD = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE
CIFAR_CLASSES = 10


class DatasetFormatError(ValueError):
    pass


class TrainingDivergence(ArithmeticError):
    pass


@dataclass(eq=False)
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        self.images = check_image_batch(self.images)
        self.labels = np.asarray(self.labels, dtype=np.int64).ravel()
        self.num_classes = int(self.num_classes)
        if self.labels.shape[0] != self.images.shape[0]:
            raise DatasetFormatError(
                f"{self.images.shape[0]} images but {self.labels.shape[0]} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DatasetFormatError(f"labels must lie in [0, {self.num_classes})")
        if self.split not in ("train", "test"):
            raise DatasetFormatError(f"split must be 'train' or 'test', got {self.split!r}")

    def __len__(self):
        return self.images.shape[0]

    @property
    def image_shape(self) -> tuple:
        return tuple(self.images.shape[1:])


# -- CIFAR-10 binary ------------------------------------------------------------

def read_cifar10_file(path, split: str = "train") -> Dataset:
    raw = Path(path).read_bytes()
    if len(raw) == 0 or len(raw) % CIFAR_RECORD:
        bad = (len(raw) // CIFAR_RECORD) * CIFAR_RECORD
        raise DatasetFormatError(
            f"{path}: length {len(raw)} is not a positive multiple of {CIFAR_RECORD}; "
            f"incomplete record at byte offset {bad}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels >= CIFAR_CLASSES)
    if bad.size:
        r = int(bad[0])
        raise DatasetFormatError(
            f"{path}: record {r} (byte offset {r * CIFAR_RECORD}) has label {labels[r]} >= {CIFAR_CLASSES}")
    planes = rec[:, 1:].reshape(-1, 3, CIFAR_SIDE, CIFAR_SIDE)
    images = planes.transpose(0, 2, 3, 1).astype(np.float64) / 255.0
    return Dataset(images, labels, CIFAR_CLASSES, split)


def write_cifar10_file(path, data: Dataset) -> None:
    if data.image_shape != (CIFAR_SIDE, CIFAR_SIDE, 3):
        raise DatasetFormatError(f"CIFAR-10 records hold 32x32x3 images, got {data.image_shape}")
    if data.num_classes > CIFAR_CLASSES:
        raise DatasetFormatError("CIFAR-10 labels must be < 10")
    pixels = np.rint(data.images * 255.0).astype(np.uint8).transpose(0, 3, 1, 2).reshape(len(data), -1)
    out = np.concatenate([data.labels.astype(np.uint8)[:, None], pixels], axis=1)
    Path(path).write_bytes(out.tobytes())


def load_cifar10(directory, split: str = "train") -> Dataset:
    """Load the binary-version batches found in ``directory``."""
    directory = Path(directory)
    if split == "train":
        files = [directory / f"data_batch_{i}.bin" for i in range(1, 6)]
        files = [f for f in files if f.exists()]
    elif split == "test":
        files = [directory / "test_batch.bin"] if (directory / "test_batch.bin").exists() else []
    else:
        raise DatasetFormatError(f"split must be 'train' or 'test', got {split!r}")
    if not files:
        raise DatasetFormatError(f"no CIFAR-10 {split} batch files in {directory}")
    parts = [read_cifar10_file(f, split) for f in files]
    return Dataset(np.concatenate([p.images for p in parts]),
                   np.concatenate([p.labels for p in parts]), CIFAR_CLASSES, split)


# -- native container -------------------------------------------------------------

def save_dataset(path, data: Dataset) -> None:
    """JSON header line, then float32 LE pixels ``[N, H, W, C]``, then uint8 labels."""
    if data.num_classes > 256:
        raise DatasetFormatError("the native container stores labels as single bytes")
    n, h, w, c = data.images.shape
    header = {"format_version": FORMAT_VERSION, "h": h, "w": w, "c": c, "n": n,
              "num_classes": data.num_classes, "split": data.split}
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(np.ascontiguousarray(data.images, dtype="<f4").tobytes())
        fh.write(data.labels.astype(np.uint8).tobytes())


def load_dataset(path) -> Dataset:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    try:
        header = json.loads(raw[:nl])
        n, h, w, c = (int(header[k]) for k in ("n", "h", "w", "c"))
        num_classes = int(header["num_classes"])
    except (ValueError, KeyError, TypeError) as exc:
        raise DatasetFormatError(f"{path}: bad header: {exc}") from None
    body = raw[nl + 1:]
    n_pix = n * h * w * c
    if len(body) != 4 * n_pix + n:
        raise DatasetFormatError(
            f"{path}: header promises {n} images of {h}x{w}x{c} ({4 * n_pix + n} bytes) "
            f"but the body has {len(body)} bytes")
    pixels = np.frombuffer(body[:4 * n_pix], dtype="<f4").astype(np.float64).reshape(n, h, w, c)
    labels = np.frombuffer(body[4 * n_pix:], dtype=np.uint8).astype(np.int64)
    return Dataset(pixels, labels, num_classes, header.get("split", "train"))


# -- synthetic data -----------------------------------------------------------------

def _shape_masks(size: int) -> np.ndarray:
    """Four left-right symmetric, low-frequency masks."""
    m = np.zeros((4, size, size))
    q = size // 4
    m[0, :q + 1, :] = 1.0                       # top band
    m[1, size - q - 1:, :] = 1.0                # bottom band
    m[2, q:size - q, q:size - q] = 1.0          # centre block
    m[3, 0, :] = m[3, -1, :] = m[3, :, 0] = m[3, :, -1] = 1.0  # frame
    return m


def make_texture_shape_dataset(n: int, seed: int = 0, size: int = 8,
                               split: str = "train") -> Dataset:
    """Four classes defined by shape, rendered with random colours and texture.

    The class is carried by a low-frequency mask; colours, a vertical jitter
    and high-frequency noise are nuisance factors.
    """
    if size < 4:
        raise ValueError("size must be at least 4")
    g = RngStream(seed, 7, 0 if split == "train" else 1).generator
    masks = _shape_masks(size)
    labels = g.integers(0, 4, size=n)
    shift = g.integers(-1, 2, size=n)
    fg = g.uniform(0.45, 1.0, size=(n, 1, 1, 3))
    bg = g.uniform(0.0, 0.4, size=(n, 1, 1, 3))
    amp = g.uniform(0.05, 0.2, size=(n, 1, 1, 1))
    noise = g.uniform(-1.0, 1.0, size=(n, size, size, 3))
    m = np.stack([np.roll(masks[c], s, axis=0) if c < 2 else masks[c] for c, s in zip(labels, shift)])
    m = m[..., None]
    img = bg + (fg - bg) * m + amp * noise
    img = np.clip(img, 0.0, 1.0).astype(np.float32).astype(np.float64)
    return Dataset(img, labels, 4, split)


def corrupt_labels(labels, num_classes: int, fraction: float, seed: int) -> np.ndarray:
    """Reassign ``round(fraction * n)`` labels to a different, random class."""
    labels = np.asarray(labels, dtype=np.int64).copy()
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"label noise fraction must be in [0, 1], got {fraction}")
    k = int(round(fraction * labels.size))
    if k == 0 or num_classes < 2:
        return labels
    g = RngStream(seed, 11).generator
    idx = g.permutation(labels.size)[:k]
    offset = g.integers(1, num_classes, size=k)
    labels[idx] = (labels[idx] + offset) % num_classes
    return labels


# -- training -------------------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 0.05
    dropout_rate: float = 0.0
    conv_channels: list = field(default_factory=lambda: [8])
    dense_units: list = field(default_factory=lambda: [32])
    label_noise: float = 0.0
    seed: int = 0

    def __post_init__(self):
        self.epochs = int(self.epochs)
        self.batch_size = int(self.batch_size)
        self.learning_rate = float(self.learning_rate)
        self.dropout_rate = float(self.dropout_rate)
        self.label_noise = float(self.label_noise)
        self.conv_channels = [int(c) for c in self.conv_channels]
        self.dense_units = [int(u) for u in self.dense_units]
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate < 0:
            raise ValueError("epochs >= 0, batch_size >= 1 and learning_rate >= 0 required")
        if any(c < 1 for c in self.conv_channels + self.dense_units):
            raise ValueError("layer widths must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")


@dataclass
class TrainResult:
    model: Model
    train_accuracy: float
    test_accuracy: float | None
    losses: list


def _uniform_fan_in(g, shape, fan_in):
    bound = 1.0 / math.sqrt(fan_in)
    return g.uniform(-bound, bound, size=shape)


def init_model(config: TrainConfig, input_shape, num_classes: int, mean=None, std=None) -> Model:
    g = RngStream(config.seed, 0).generator
    H, W, C = input_shape
    layers = []
    shape = (H, W, C)
    for out_c in config.conv_channels:
        fan_in = shape[2] * 9
        layers += [Conv2d(_uniform_fan_in(g, (out_c, shape[2], 3, 3), fan_in), np.zeros(out_c),
                          padding="same"), Relu()]
        shape = (shape[0], shape[1], out_c)
        if min(shape[0], shape[1]) >= 2:
            layers.append(MaxPool2d(2))
            shape = (shape[0] // 2, shape[1] // 2, out_c)
    layers.append(Flatten())
    width = int(np.prod(shape))
    for units in config.dense_units:
        layers += [Dense(_uniform_fan_in(g, (units, width), width), np.zeros(units)), Relu()]
        if config.dropout_rate > 0:
            layers.append(Dropout(config.dropout_rate))
        width = units
    layers += [Dense(_uniform_fan_in(g, (num_classes, width), width), np.zeros(num_classes)), Softmax()]
    meta = {"init": "uniform(+-1/sqrt(fan_in))", "init_seed": config.seed,
            "train_config": asdict(config)}
    return round_to_f32(Model(layers, input_shape, num_classes, mean, std, meta))


def accuracy(model: Model, X, y) -> float:
    pred = np.argmax(forward_batch(model, X), axis=1)
    return float(np.mean(pred == np.asarray(y)))


def train_tiny(config: TrainConfig, train: Dataset, test: Dataset | None = None,
               labels=None) -> TrainResult:
    """Plain mini-batch SGD on mean cross-entropy.

    ``labels`` overrides ``train.labels`` (used for label-noise runs); training
    accuracy is measured against the labels actually trained on.
    """
    if len(train) > 10_000 or max(train.image_shape[:2]) > 16:
        raise ValueError("train_tiny is meant for at most 10k images of at most 16x16")
    X = train.images
    y = train.labels if labels is None else np.asarray(labels, dtype=np.int64)
    mean = X.mean(axis=(0, 1, 2)).astype(np.float32).astype(np.float64)
    std = np.maximum(X.std(axis=(0, 1, 2)), 1e-3).astype(np.float32).astype(np.float64)
    model = init_model(config, train.image_shape, train.num_classes, mean, std)
    layers = list(model.layers)
    shuffle = RngStream(config.seed, 1).generator
    losses = []
    for epoch in range(config.epochs):
        order = shuffle.permutation(len(X))
        for start in range(0, len(X), config.batch_size):
            idx = order[start:start + config.batch_size]
            loss, grads = loss_and_gradients(model, X[idx], y[idx])
            if not math.isfinite(loss):
                raise TrainingDivergence(f"non-finite loss in epoch {epoch}")
            if config.learning_rate:
                for i, g in enumerate(grads):
                    if g:
                        layers[i] = layers[i].with_params(
                            **{k: getattr(layers[i], k) - config.learning_rate * v for k, v in g.items()})
                model = model.with_layers(layers)
        full_loss, _ = loss_and_gradients(model, X, y)
        if not math.isfinite(full_loss):
            raise TrainingDivergence(f"non-finite loss after epoch {epoch}")
        losses.append(full_loss)
    model = round_to_f32(model)
    model.metadata = dict(model.metadata, label_noise=config.label_noise)
    return TrainResult(model, accuracy(model, X, y),
                       None if test is None else accuracy(model, test.images, test.labels), losses)


class TinyClassifier(ClassifierMixin, BaseEstimator):
    """scikit-learn classifier over ``[N, H, W, C]`` image stacks, trained by :func:`train_tiny`."""

    def __init__(self, epochs=30, batch_size=32, learning_rate=0.05, dropout_rate=0.0,
                 conv_channels=(8,), dense_units=(32,), seed=0):
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.dropout_rate = dropout_rate
        self.conv_channels = conv_channels
        self.dense_units = dense_units
        self.seed = seed

    def fit(self, X, y):
        X = check_image_batch(X, "X")
        self.classes_, y_enc = np.unique(np.asarray(y), return_inverse=True)
        data = Dataset(X, y_enc, max(len(self.classes_), 2))
        cfg = TrainConfig(self.epochs, self.batch_size, self.learning_rate, self.dropout_rate,
                          list(self.conv_channels), list(self.dense_units), 0.0, self.seed)
        result = train_tiny(cfg, data)
        self.model_ = result.model
        self.loss_curve_ = result.losses
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        return forward_batch(self.model_, check_image_batch(X, "X"))[:, :len(self.classes_)]

    def predict(self, X):
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]


# -- zoo manifest ----------------------------------------------------------------------

@dataclass
class ManifestEntry:
    model_id: str
    path: str
    hparams: dict
    train_acc: float
    test_acc: float
    seed: int | None = None


@dataclass
class ZooManifest:
    axes: list
    entries: list
    root: Path = field(default=Path("."), compare=False)

    def __post_init__(self):
        self.axes = list(self.axes)
        for e in self.entries:
            missing = set(self.axes) - set(e.hparams)
            if missing:
                raise DatasetFormatError(f"{e.model_id}: no value for axes {sorted(missing)}")

    def model_path(self, entry: ManifestEntry) -> Path:
        return self.root / entry.path

    def to_dict(self) -> dict:
        entries = []
        for e in self.entries:
            d = {"model_id": e.model_id, "path": e.path, "hparams": e.hparams,
                 "train_acc": e.train_acc, "test_acc": e.test_acc}
            if e.seed is not None:
                d["seed"] = e.seed
            entries.append(d)
        return {"format_version": FORMAT_VERSION, "axes": self.axes, "entries": entries}


def save_manifest(manifest: ZooManifest, path) -> None:
    Path(path).write_text(json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + "\n")


def load_manifest(path, check_paths: bool = True) -> ZooManifest:
    path = Path(path)
    try:
        d = json.loads(path.read_text())
        entries = [ManifestEntry(e["model_id"], e["path"], dict(e["hparams"]),
                                 float(e["train_acc"]), float(e["test_acc"]), e.get("seed"))
                   for e in d["entries"]]
        manifest = ZooManifest(d["axes"], entries, path.parent)
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise DatasetFormatError(f"cannot read zoo manifest {path}: {exc}") from None
    if check_paths:
        for e in entries:
            if not manifest.model_path(e).exists():
                raise DatasetFormatError(f"{path}: model file for {e.model_id} not found: {e.path}")
    return manifest


# -- synthetic zoo -------------------------------------------------------------------------

DEFAULT_GRID = {
    "axes": {"learning_rate": [0.1, 0.01], "batch_size": [8, 32], "label_noise": [0.0, 0.4]},
    "replicates": 2,
    "learning_rate": 0.1,
    "batch_size": 8,
    "label_noise": 0.0,
    "epochs": 60,
    "conv_channels": [8],
    "dense_units": [64],
    "dropout_rate": 0.0,
    "n_train": 128,
    "n_test": 256,
    "image_size": 8,
}

GRID_AXES = ("learning_rate", "batch_size", "label_noise", "dropout_rate", "epochs")


def resolve_grid(grid: dict | None) -> dict:
    out = json.loads(json.dumps(DEFAULT_GRID))
    if grid:
        unknown = set(grid) - set(out)
        if unknown:
            raise ValueError(f"unknown grid keys {sorted(unknown)}")
        out.update(grid)
    axes = out["axes"]
    bad = set(axes) - set(GRID_AXES)
    if bad:
        raise ValueError(f"unsupported grid axes {sorted(bad)}; choose from {GRID_AXES}")
    if len(axes) < 2 or any(len(v) < 2 for v in axes.values()):
        raise ValueError("a zoo grid needs at least two axes with at least two values each")
    if int(out["replicates"]) < 1:
        raise ValueError("replicates must be >= 1")
    return out


def _fmt(v) -> str:
    return f"{v:g}" if isinstance(v, float) else str(v)


def generate_synthetic_zoo(grid: dict | None, train: Dataset, test: Dataset, out_dir,
                           seed: int = 0, threads: int | None = None) -> ZooManifest:
    """Train one model per grid cell and replicate; write models and ``zoo.json``."""
    grid = resolve_grid(grid)
    out_dir = Path(out_dir)
    (out_dir / "models").mkdir(parents=True, exist_ok=True)
    axes = list(grid["axes"])
    jobs = []
    for rep in range(int(grid["replicates"])):
        for values in itertools.product(*(grid["axes"][a] for a in axes)):
            hp = dict(zip(axes, values))
            model_seed = int(np.random.SeedSequence([seed & 0xFFFFFFFF, seed >> 32, rep])
                             .generate_state(2, np.uint64)[0])
            cfg = TrainConfig(
                epochs=hp.get("epochs", grid["epochs"]),
                batch_size=hp.get("batch_size", grid["batch_size"]),
                learning_rate=hp.get("learning_rate", grid["learning_rate"]),
                dropout_rate=hp.get("dropout_rate", grid["dropout_rate"]),
                conv_channels=grid["conv_channels"],
                dense_units=grid["dense_units"],
                label_noise=hp.get("label_noise", grid["label_noise"]),
                seed=model_seed,
            )
            model_id = f"m{len(jobs):03d}_" + "_".join(f"{a}{_fmt(hp[a])}" for a in axes) + f"_r{rep}"
            jobs.append((model_id, hp, cfg, rep))

    def run(job):
        model_id, hp, cfg, rep = job
        labels = corrupt_labels(train.labels, train.num_classes, cfg.label_noise, cfg.seed)
        res = train_tiny(cfg, train, test, labels=labels)
        res.model.metadata.update({"model_id": model_id, "hparams": hp, "replicate": rep})
        rel = f"models/{model_id}.json"
        save_model(res.model, out_dir / rel)
        return ManifestEntry(model_id, rel, hp, res.train_accuracy, res.test_accuracy, cfg.seed)

    entries = ordered_map(run, jobs, threads)
    manifest = ZooManifest(axes, entries, out_dir)
    save_manifest(manifest, out_dir / "zoo.json")
    return manifest
