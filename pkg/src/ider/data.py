"""Datasets: synthetic blobs, bundled digits, and readers for CIFAR-10 / MNIST binaries.

Directory layouts understood by :func:`load_dataset` (root given in the
config or via the ``IDER_DATA_ROOT`` environment variable)::

    <root>/cifar-10-batches-bin/data_batch_{1..5}.bin, test_batch.bin
    <root>/mnist/{train,t10k}-{images-idx3,labels-idx1}-ubyte[.gz]

Each CIFAR record is one label byte followed by 3072 pixel bytes (channel-major
32x32x3). MNIST files use the IDX format (big-endian header, uint8 payload).
"""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError

DATA_ROOT_ENV = "IDER_DATA_ROOT"


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    x: np.ndarray
    y: np.ndarray
    n_classes: int
    split: str = "train"
    name: str = ""

    def __post_init__(self):
        if self.split not in ("train", "test"):
            raise ConfigError(f"split must be 'train' or 'test', got {self.split!r}")
        if self.n_classes < 1:
            raise ConfigError("n_classes must be positive")
        if len(self.x) != len(self.y):
            raise ConfigError(f"{len(self.x)} inputs but {len(self.y)} labels")
        if len(self.y) and (self.y.min() < 0 or self.y.max() >= self.n_classes):
            raise ConfigError(f"labels must lie in [0, {self.n_classes})")

    def __len__(self):
        return len(self.y)

    @property
    def input_shape(self) -> tuple[int, ...]:
        return tuple(self.x.shape[1:])

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(self.x[idx], self.y[idx], self.n_classes, self.split, self.name)

    def indices_of(self, classes) -> np.ndarray:
        return np.flatnonzero(np.isin(self.y, list(classes)))


def _standardize(train_x: np.ndarray, test_x: np.ndarray):
    # per-channel statistics from the training split only
    axes = (0,) + tuple(range(2, train_x.ndim))
    mean = train_x.mean(axis=axes, keepdims=True)
    std = train_x.std(axis=axes, keepdims=True) + 1e-6
    return ((train_x - mean) / std).astype(np.float32), ((test_x - mean) / std).astype(np.float32)


def _stratified_split(y: np.ndarray, test_fraction: float, seed: int):
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for c in np.unique(y):
        idx = rng.permutation(np.flatnonzero(y == c))
        n_test = int(round(len(idx) * test_fraction))
        test_idx.append(idx[:n_test])
        train_idx.append(idx[n_test:])
    return np.sort(np.concatenate(train_idx)), np.sort(np.concatenate(test_idx))


def make_blobs(n_classes: int = 10, n_per_class: int = 60, dim: int = 8,
               spread: float = 1.0, separation: float = 3.0, test_fraction: float = 0.25,
               seed: int = 0):
    """Gaussian blobs in ``dim`` dimensions, one blob per class."""
    rng = np.random.default_rng(seed)
    centers = rng.normal(scale=separation, size=(n_classes, dim))
    y = np.repeat(np.arange(n_classes), n_per_class)
    x = centers[y] + rng.normal(scale=spread, size=(len(y), dim))
    tr, te = _stratified_split(y, test_fraction, seed)
    return (LabeledDataset(x[tr].astype(np.float32), y[tr], n_classes, "train", "blobs"),
            LabeledDataset(x[te].astype(np.float32), y[te], n_classes, "test", "blobs"))


def load_digits(test_fraction: float = 0.3, split_seed: int = 0):
    """The 8x8 handwritten digits bundled with scikit-learn, as (N, 1, 8, 8) images."""
    from sklearn.datasets import load_digits as _sk_digits

    bunch = _sk_digits()
    x = bunch.images.astype(np.float32)[:, None] / 16.0
    y = bunch.target.astype(np.int64)
    tr, te = _stratified_split(y, test_fraction, split_seed)
    xtr, xte = _standardize(x[tr], x[te])
    return (LabeledDataset(xtr, y[tr], 10, "train", "digits"),
            LabeledDataset(xte, y[te], 10, "test", "digits"))


def load_mnist5k(test_fraction: float = 0.2, split_seed: int = 0, downsample: int = 1):
    """The 5000-image MNIST subset (500 per class) bundled with mlxtend.

    ``downsample`` average-pools the 28x28 images by that factor.
    """
    from mlxtend.data import mnist_data

    x, y = mnist_data()
    x = x.reshape(-1, 1, 28, 28).astype(np.float32) / 255.0
    if downsample > 1:
        s = 28 // downsample
        x = x[:, :, : s * downsample, : s * downsample]
        x = x.reshape(-1, 1, s, downsample, s, downsample).mean(axis=(3, 5))
    y = y.astype(np.int64)
    tr, te = _stratified_split(y, test_fraction, split_seed)
    xtr, xte = _standardize(x[tr], x[te])
    return (LabeledDataset(xtr, y[tr], 10, "train", "mnist5k"),
            LabeledDataset(xte, y[te], 10, "test", "mnist5k"))


def _read_cifar_batch(path: Path):
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size % 3073:
        raise ValueError(f"{path}: size {raw.size} is not a multiple of 3073")
    raw = raw.reshape(-1, 3073)
    return raw[:, 1:].reshape(-1, 3, 32, 32), raw[:, 0].astype(np.int64)


def load_cifar10(root: str | os.PathLike):
    base = Path(root)
    if (base / "cifar-10-batches-bin").is_dir():
        base = base / "cifar-10-batches-bin"
    train_files = sorted(base.glob("data_batch_*.bin"))
    test_file = base / "test_batch.bin"
    if not train_files or not test_file.exists():
        raise FileNotFoundError(f"no CIFAR-10 binary batches under {base}")
    parts = [_read_cifar_batch(p) for p in train_files]
    xtr = np.concatenate([p[0] for p in parts]).astype(np.float32) / 255.0
    ytr = np.concatenate([p[1] for p in parts])
    xte, yte = _read_cifar_batch(test_file)
    xtr, xte = _standardize(xtr, xte.astype(np.float32) / 255.0)
    return (LabeledDataset(xtr, ytr, 10, "train", "cifar10"),
            LabeledDataset(xte, yte, 10, "test", "cifar10"))


def read_idx(path: str | os.PathLike) -> np.ndarray:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        data = fh.read()
    zero, dtype_code, ndim = struct.unpack(">HBB", data[:4])
    if zero != 0 or dtype_code != 0x08:
        raise ValueError(f"{path}: not a uint8 IDX file")
    shape = struct.unpack(">" + "I" * ndim, data[4:4 + 4 * ndim])
    return np.frombuffer(data, dtype=np.uint8, offset=4 + 4 * ndim).reshape(shape)


def _find(base: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz"):
        if (base / name).exists():
            return base / name
    raise FileNotFoundError(f"{stem}[.gz] not found under {base}")


def load_mnist(root: str | os.PathLike):
    base = Path(root)
    if (base / "mnist").is_dir():
        base = base / "mnist"
    xtr = read_idx(_find(base, "train-images-idx3-ubyte")).astype(np.float32)[:, None] / 255.0
    ytr = read_idx(_find(base, "train-labels-idx1-ubyte")).astype(np.int64)
    xte = read_idx(_find(base, "t10k-images-idx3-ubyte")).astype(np.float32)[:, None] / 255.0
    yte = read_idx(_find(base, "t10k-labels-idx1-ubyte")).astype(np.int64)
    xtr, xte = _standardize(xtr, xte)
    return (LabeledDataset(xtr, ytr, 10, "train", "mnist"),
            LabeledDataset(xte, yte, 10, "test", "mnist"))


def resolve_root(path: str | None) -> Path:
    root = path or os.environ.get(DATA_ROOT_ENV)
    if not root:
        raise ConfigError(f"dataset path not set (config dataset.path or ${DATA_ROOT_ENV})")
    return Path(root).expanduser()


def load_dataset(name: str, path: str | None = None, **kwargs):
    """Return ``(train, test)`` for a named dataset."""
    if name == "digits":
        return load_digits(**kwargs)
    if name == "mnist5k":
        return load_mnist5k(**kwargs)
    if name == "blobs":
        return make_blobs(**kwargs)
    if name == "cifar10":
        return load_cifar10(resolve_root(path))
    if name == "mnist":
        return load_mnist(resolve_root(path))
    raise ConfigError(f"unknown dataset {name!r}")
