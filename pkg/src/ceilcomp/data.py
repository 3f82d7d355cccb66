"""MNIST (IDX) and CIFAR-10 (binary batch) loaders, normalisation, batching."""
import gzip
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, DataIOError, FormatError, ParameterError

DATA_DIR_ENV = "CEILCOMP_DATA_DIR"

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}

CIFAR_RECORD = 3073
CIFAR_PER_FILE = 10000
CIFAR_FILE_BYTES = CIFAR_RECORD * CIFAR_PER_FILE  # 30,730,000
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILE = "test_batch.bin"


@dataclass
class LabeledDataset:
    images: np.ndarray               # [N, c, h, w] float32
    labels: np.ndarray               # [N] int64
    splits: dict                     # "train" / "val" / "test" -> index array into images
    num_classes: int
    mean: np.ndarray = None          # per-channel, from the train split
    std: np.ndarray = None
    normalized: bool = False
    name: str = ""
    meta: dict = field(default_factory=dict)

    def split(self, tag):
        idx = self.splits[tag]
        return self.images[idx], self.labels[idx]

    def __len__(self):
        return len(self.labels)


def default_data_dir(name):
    root = os.environ.get(DATA_DIR_ENV)
    return Path(root) / name if root else None


# ---------------------------------------------------------------- IDX


def _read_bytes(path):
    path = Path(path)
    if not path.exists() and Path(str(path) + ".gz").exists():
        path = Path(str(path) + ".gz")
    if not path.exists():
        raise DataIOError(f"missing data file {path}")
    raw = path.read_bytes()
    return gzip.decompress(raw) if path.suffix == ".gz" else raw, path


def read_idx(path, expect_magic):
    raw, path = _read_bytes(path)
    if len(raw) < 8:
        raise DataIOError(f"{path}: truncated IDX header")
    magic = int.from_bytes(raw[:4], "big")
    if magic != expect_magic:
        raise FormatError(f"{path}: bad magic number 0x{magic:08x}, expected 0x{expect_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataIOError(f"{path}: truncated IDX header")
    dims = tuple(int.from_bytes(raw[4 + 4 * i: 8 + 4 * i], "big") for i in range(ndim))
    count = int(np.prod(dims))
    if len(raw) - header < count:
        raise DataIOError(f"{path}: truncated file, expected {count} data bytes, found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def load_mnist(path=None, val_fraction=0.1, seed=0, normalize=True):
    """The four standard IDX files (optionally ``.gz``) -> train/val/test dataset, 1x28x28."""
    path = Path(path) if path is not None else default_data_dir("mnist")
    if path is None:
        raise DataError(f"no MNIST directory given and ${DATA_DIR_ENV} is unset")
    xtr = read_idx(path / MNIST_FILES["train_images"], IDX_IMAGES_MAGIC)
    ytr = read_idx(path / MNIST_FILES["train_labels"], IDX_LABELS_MAGIC)
    xte = read_idx(path / MNIST_FILES["test_images"], IDX_IMAGES_MAGIC)
    yte = read_idx(path / MNIST_FILES["test_labels"], IDX_LABELS_MAGIC)
    if len(xtr) != len(ytr) or len(xte) != len(yte):
        raise FormatError(f"{path}: image/label counts differ")
    images = np.concatenate([xtr, xte])[:, None].astype(np.float32) / 255.0
    labels = np.concatenate([ytr, yte]).astype(np.int64)
    ds = _with_splits(images, labels, len(xtr), val_fraction, seed, 10, "mnist")
    return normalize_dataset(ds) if normalize else ds


# ---------------------------------------------------------------- CIFAR-10


def read_cifar_batch(path):
    raw, path = _read_bytes(path)
    if len(raw) != CIFAR_FILE_BYTES:
        raise FormatError(f"{path}: {len(raw)} bytes, expected {CIFAR_FILE_BYTES}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(CIFAR_PER_FILE, CIFAR_RECORD)
    return rec[:, 1:].reshape(-1, 3, 32, 32), rec[:, 0].astype(np.int64)


def load_cifar10(path=None, val_fraction=0.1, seed=0, normalize=True):
    path = Path(path) if path is not None else default_data_dir("cifar10")
    if path is None:
        raise DataError(f"no CIFAR-10 directory given and ${DATA_DIR_ENV} is unset")
    if (path / "cifar-10-batches-bin").is_dir():
        path = path / "cifar-10-batches-bin"
    parts = [read_cifar_batch(path / f) for f in CIFAR_TRAIN_FILES + (CIFAR_TEST_FILE,)]
    images = np.concatenate([p[0] for p in parts]).astype(np.float32) / 255.0
    labels = np.concatenate([p[1] for p in parts])
    if labels.max() >= 10:
        raise FormatError(f"{path}: label byte {labels.max()} out of range")
    ds = _with_splits(images, labels, 5 * CIFAR_PER_FILE, val_fraction, seed, 10, "cifar10")
    return normalize_dataset(ds) if normalize else ds


# ---------------------------------------------------------------- splits / normalisation / batching


def _with_splits(images, labels, n_train_source, val_fraction, seed, num_classes, name):
    order = np.random.default_rng(seed).permutation(n_train_source)
    n_val = int(round(val_fraction * n_train_source))
    splits = {
        "train": np.sort(order[n_val:]),
        "val": np.sort(order[:n_val]),
        "test": np.arange(n_train_source, len(labels)),
    }
    return LabeledDataset(images, labels, splits, num_classes, name=name)


def make_dataset(images, labels, num_classes=None, val_fraction=0.0, test_fraction=0.0, seed=0, name="array"):
    """Wrap in-memory arrays; the last ``test_fraction`` becomes the test split."""
    images = np.ascontiguousarray(images, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    if len(images) == 0:
        raise DataError("dataset is empty")
    n_test = int(round(test_fraction * len(labels)))
    n_cls = int(num_classes if num_classes is not None else labels.max() + 1)
    return _with_splits(images, labels, len(labels) - n_test, val_fraction, seed, n_cls, name)


def normalize_dataset(ds):
    """Per-channel standardisation with statistics from the train split only; applied once."""
    if ds.normalized:
        raise DataError("dataset is already normalized")
    train = ds.images[ds.splits["train"]]
    axes = (0, 2, 3) if train.ndim == 4 else (0,)
    mean = train.mean(axis=axes, dtype=np.float64)
    std = train.std(axis=axes, dtype=np.float64)
    std[std == 0] = 1.0
    shape = (1, -1, 1, 1) if train.ndim == 4 else (1, -1)
    images = ((ds.images - mean.reshape(shape)) / std.reshape(shape)).astype(np.float32)
    return LabeledDataset(images, ds.labels, ds.splits, ds.num_classes, mean.astype(np.float32),
                          std.astype(np.float32), True, ds.name, dict(ds.meta))


def batch_order(n, batch_size, seed=0, shuffle=True):
    if batch_size < 1:
        raise ParameterError(f"batch_size must be >= 1, got {batch_size}")
    idx = np.random.default_rng(seed).permutation(n) if shuffle else np.arange(n)
    return [idx[i:i + batch_size] for i in range(0, n, batch_size)]


def batches(images, labels, batch_size, seed=0, shuffle=True):
    """Yield ``(images, labels, indices)``; the final partial batch is included."""
    for idx in batch_order(len(labels), batch_size, seed, shuffle):
        yield images[idx], labels[idx], idx


DATASETS = ("mnist", "cifar10")


def load_dataset(name, data_dir=None, val_fraction=0.1, seed=0):
    """Load a dataset by name from ``data_dir`` (or ``data_dir/<name>``, or ``$CEILCOMP_DATA_DIR/<name>``)."""
    if name not in DATASETS:
        raise ParameterError(f"unknown dataset {name!r}; use one of {', '.join(DATASETS)}")
    if data_dir is None:
        path = default_data_dir(name)
    else:
        path = Path(data_dir)
        if (path / name).is_dir():
            path = path / name
    loader = load_mnist if name == "mnist" else load_cifar10
    return loader(path, val_fraction=val_fraction, seed=seed)
