"""Readers for the MNIST IDX and CIFAR-10 binary file formats."""
import gzip
from pathlib import Path
from typing import Iterable

import numpy as np

from .utils import DatasetFormatError, logger

IDX_IMAGES_MAGIC = 2051  # 00 00 08 03: unsigned bytes, 3 dimensions
IDX_LABELS_MAGIC = 2049  # 00 00 08 01: unsigned bytes, 1 dimension

CIFAR_IMAGE_SHAPE = (3, 32, 32)
CIFAR_RECORD_SIZE = 1 + 3 * 32 * 32  # label byte + channel-major pixels
CIFAR_NUM_CLASSES = 10

MNIST_NUM_CLASSES = 10


def _read_bytes(path: Path) -> bytes:
    path = Path(path)
    if path.suffix == ".gz":
        with gzip.open(path, "rb") as f:
            return f.read()
    return path.read_bytes()


def parse_idx(raw: bytes, expected_magic: int, path: Path | str = "<bytes>") -> "numpy array (uint8)":
    if len(raw) < 4:
        raise DatasetFormatError("file too short for IDX magic", path=path, offset=len(raw))
    magic = int(np.frombuffer(raw, dtype=">u4", count=1)[0])
    if magic != expected_magic:
        raise DatasetFormatError(f"wrong magic number {magic:#010x}, expected {expected_magic:#010x}", path=path, offset=0)
    ndim = raw[3]
    header_size = 4 + 4 * ndim
    if len(raw) < header_size:
        raise DatasetFormatError("file too short for IDX header", path=path, offset=len(raw))
    dims = tuple(int(d) for d in np.frombuffer(raw, dtype=">u4", count=ndim, offset=4))
    size = int(np.prod(dims))
    if len(raw) != header_size + size:
        raise DatasetFormatError(
            f"expected {size} data bytes for dimensions {dims}, found {len(raw) - header_size}",
            path=path, offset=min(len(raw), header_size + size),
        )
    return np.frombuffer(raw, dtype=np.uint8, offset=header_size).reshape(dims)


def load_mnist_idx(images_path: Path | str, labels_path: Path | str) -> "Dataset":
    """images as (N, 1, H, W) in [0, 1], labels as integers"""
    from .tasks import Dataset

    images = parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, images_path)
    labels = parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, labels_path)
    if images.shape[0] != labels.shape[0]:
        raise DatasetFormatError(
            f"{images.shape[0]} images but {labels.shape[0]} labels", path=labels_path, offset=8,
        )
    if labels.size and labels.max() >= MNIST_NUM_CLASSES:
        bad = int(np.argmax(labels >= MNIST_NUM_CLASSES))
        raise DatasetFormatError(f"label {labels[bad]} out of range", path=labels_path, offset=8 + bad)
    logger.debug(f"Loaded {images.shape[0]} IDX images of size {images.shape[1:]} from {images_path}")
    return Dataset(
        inputs=images[:, np.newaxis].astype(np.float64) / 255,
        targets=labels.astype(np.int64),
        num_classes=MNIST_NUM_CLASSES,
    )


def parse_cifar10(raw: bytes, path: Path | str = "<bytes>") -> tuple["numpy array (n, 3, 32, 32)", "numpy array (n,)"]:
    if not raw or len(raw) % CIFAR_RECORD_SIZE:
        complete = len(raw) // CIFAR_RECORD_SIZE
        raise DatasetFormatError(
            f"size {len(raw)} is not a positive multiple of the {CIFAR_RECORD_SIZE} byte record length",
            path=path, offset=complete * CIFAR_RECORD_SIZE,
        )
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD_SIZE)
    labels = records[:, 0]
    if labels.max() >= CIFAR_NUM_CLASSES:
        bad = int(np.argmax(labels >= CIFAR_NUM_CLASSES))
        raise DatasetFormatError(f"label {labels[bad]} out of range", path=path, offset=bad * CIFAR_RECORD_SIZE)
    return records[:, 1:].reshape(-1, *CIFAR_IMAGE_SHAPE), labels


def load_cifar10_bin(paths: Iterable[Path | str]) -> "Dataset":
    from .tasks import Dataset

    images, labels = [], []
    for p in paths:
        i, l = parse_cifar10(_read_bytes(p), p)
        images.append(i)
        labels.append(l)
    if not images:
        raise DatasetFormatError("no CIFAR-10 batch files given")
    logger.debug(f"Loaded {sum(len(l) for l in labels)} CIFAR-10 records from {len(images)} files")
    return Dataset(
        inputs=np.concatenate(images).astype(np.float64) / 255,
        targets=np.concatenate(labels).astype(np.int64),
        num_classes=CIFAR_NUM_CLASSES,
    )
