"""MNIST in IDX format: parsing, pairing, normalisation and batching."""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
ROWS = COLS = 28
PIXELS = ROWS * COLS
CLASSES = 10

DATA_DIR_ENV = "MNIST_DIR"

# spawn key of the shuffling substream
SHUFFLE_KEY = 1

SPLITS = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class IdxError(ValueError):
    pass


class BadMagicError(IdxError):
    pass


class TruncatedFileError(IdxError):
    pass


class DimensionError(IdxError):
    pass


class LabelRangeError(IdxError):
    pass


class PairingError(IdxError):
    pass


def _read_bytes(path) -> bytes:
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(2)
    opener = gzip.open if head == b"\x1f\x8b" else open
    with opener(path, "rb") as fh:
        try:
            return fh.read()
        except EOFError as exc:
            raise TruncatedFileError(f"{path}: compressed stream ends early") from exc


def _header(buf: bytes, path, magic: int, n_dims: int) -> tuple[int, ...]:
    size = 4 * (1 + n_dims)
    if len(buf) < size:
        raise TruncatedFileError(f"{path}: header needs {size} bytes, file has {len(buf)}")
    found, *dims = struct.unpack(f">{1 + n_dims}I", buf[:size])
    if found != magic:
        raise BadMagicError(f"{path}: magic {found:#010x}, expected {magic:#010x}")
    return tuple(dims)


def load_idx_images(path) -> np.ndarray:
    """Raw ``uint8`` images of shape ``(count, 28, 28)``."""
    buf = _read_bytes(path)
    count, rows, cols = _header(buf, path, IMAGE_MAGIC, 3)
    if (rows, cols) != (ROWS, COLS):
        raise DimensionError(f"{path}: images are {rows}x{cols}, expected {ROWS}x{COLS}")
    need = 16 + count * rows * cols
    if len(buf) < need:
        raise TruncatedFileError(f"{path}: expected {need} bytes, got {len(buf)}")
    return np.frombuffer(buf, dtype=np.uint8, count=count * rows * cols, offset=16).reshape(count, rows, cols)


def load_idx_labels(path) -> np.ndarray:
    buf = _read_bytes(path)
    (count,) = _header(buf, path, LABEL_MAGIC, 1)
    if len(buf) < 8 + count:
        raise TruncatedFileError(f"{path}: expected {8 + count} bytes, got {len(buf)}")
    labels = np.frombuffer(buf, dtype=np.uint8, count=count, offset=8)
    bad = labels >= CLASSES
    if bad.any():
        first = int(np.argmax(bad))
        raise LabelRangeError(f"{path}: label {labels[first]} at index {first} is outside 0..9")
    return labels


@dataclass(frozen=True)
class Dataset:
    """Images as bytes ``(N, 784)``; :meth:`pixels` gives ``v / 255``."""

    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise PairingError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.images.ndim != 2 or self.images.shape[1] != PIXELS:
            raise DimensionError(f"images must have shape (N, {PIXELS})")

    def __len__(self) -> int:
        return len(self.labels)

    def pixels(self, index=slice(None)) -> np.ndarray:
        return self.images[index].astype(np.float64) / 255.0

    def onehot(self, index=slice(None)) -> np.ndarray:
        return one_hot(self.labels[index])

    def subset(self, n: int) -> "Dataset":
        return Dataset(self.images[:n], self.labels[:n])


def one_hot(labels, classes: int = CLASSES) -> np.ndarray:
    labels = np.asarray(labels)
    out = np.zeros(labels.shape + (classes,), dtype=np.int64)
    np.put_along_axis(out, labels[..., None].astype(np.intp), 1, axis=-1)
    return out


def _find(directory: Path, name: str) -> Path:
    for candidate in (directory / name, directory / f"{name}.gz"):
        if candidate.exists():
            return candidate
    raise FileNotFoundError(f"neither {name} nor {name}.gz in {directory}")


def resolve_data_dir(data_dir=None) -> Path:
    if data_dir is None:
        data_dir = os.environ.get(DATA_DIR_ENV)
    if not data_dir:
        raise FileNotFoundError(f"no MNIST directory: pass --data-dir or set {DATA_DIR_ENV}")
    return Path(data_dir)


def load_split(split: str, data_dir=None) -> Dataset:
    directory = resolve_data_dir(data_dir)
    image_name, label_name = SPLITS[split]
    images = load_idx_images(_find(directory, image_name))
    labels = load_idx_labels(_find(directory, label_name))
    return Dataset(images.reshape(len(images), PIXELS), labels)


def load_mnist(data_dir=None) -> tuple[Dataset, Dataset]:
    return load_split("train", data_dir), load_split("test", data_dir)


def batches(dataset, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Index arrays of one epoch: a permutation fixed by ``(seed, epoch)``.

    ``dataset`` is a :class:`Dataset` or a sample count.  The final batch is
    short when ``batch_size`` does not divide the count.
    """
    n_samples = dataset if isinstance(dataset, (int, np.integer)) else len(dataset)
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    seq = np.random.SeedSequence(entropy=seed, spawn_key=(SHUFFLE_KEY, epoch))
    order = np.random.Generator(np.random.PCG64(seq)).permutation(n_samples)
    return [order[i : i + batch_size] for i in range(0, n_samples, batch_size)]

