import gzip
from pathlib import Path
import struct
import tempfile
import unittest

import numpy as np

from plasticity_lab.dataset_format import (
    CIFAR_RECORD_SIZE, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC, load_cifar10_bin, load_mnist_idx, parse_cifar10, parse_idx,
)
from plasticity_lab.tasks import DatasetConfig, dataset_from_config
from plasticity_lab.utils import DatasetFormatError


def idx_bytes(magic: int, data: np.ndarray) -> bytes:
    return struct.pack(">I", magic) + b"".join(struct.pack(">I", d) for d in data.shape) + data.astype(np.uint8).tobytes()


def cifar_bytes(labels: list[int]) -> bytes:
    out = b""
    for i, label in enumerate(labels):
        out += bytes([label]) + bytes([i % 256]) * (CIFAR_RECORD_SIZE - 1)
    return out


class TestIDX(unittest.TestCase):
    def test_parse(self):
        images = np.arange(2 * 3 * 3).reshape(2, 3, 3)
        out = parse_idx(idx_bytes(IDX_IMAGES_MAGIC, images), IDX_IMAGES_MAGIC)
        np.testing.assert_array_equal(out, images)

    def test_wrong_magic(self):
        with self.assertRaises(DatasetFormatError) as cm:
            parse_idx(idx_bytes(IDX_LABELS_MAGIC, np.zeros(3)), IDX_IMAGES_MAGIC)
        self.assertEqual(cm.exception.offset, 0)

    def test_truncated_file_reports_offset(self):
        raw = idx_bytes(IDX_IMAGES_MAGIC, np.zeros((2, 3, 3)))
        with self.assertRaises(DatasetFormatError) as cm:
            parse_idx(raw[:-5], IDX_IMAGES_MAGIC)
        self.assertEqual(cm.exception.offset, len(raw) - 5)
        with self.assertRaises(DatasetFormatError) as cm:
            parse_idx(raw[:6], IDX_IMAGES_MAGIC)
        self.assertEqual(cm.exception.offset, 6)

    def test_load_pair(self):
        with tempfile.TemporaryDirectory() as tmp:
            images = Path(tmp) / "train-images-idx3-ubyte"
            labels = Path(tmp) / "train-labels-idx1-ubyte.gz"
            images.write_bytes(idx_bytes(IDX_IMAGES_MAGIC, np.full((3, 4, 4), 255)))
            with gzip.open(labels, "wb") as f:
                f.write(idx_bytes(IDX_LABELS_MAGIC, np.array([1, 2, 9])))
            ds = load_mnist_idx(images, labels)
            self.assertEqual(ds.input_shape, (1, 4, 4))
            self.assertEqual(ds.inputs.max(), 1.0)
            np.testing.assert_array_equal(ds.targets, [1, 2, 9])
            # dataset_from_config finds plain and gzipped files
            self.assertEqual(len(dataset_from_config(DatasetConfig(name="mnist", limit=2), tmp)), 2)

    def test_label_count_mismatch(self):
        with tempfile.TemporaryDirectory() as tmp:
            images = Path(tmp) / "images"
            labels = Path(tmp) / "labels"
            images.write_bytes(idx_bytes(IDX_IMAGES_MAGIC, np.zeros((3, 2, 2))))
            labels.write_bytes(idx_bytes(IDX_LABELS_MAGIC, np.zeros(2)))
            with self.assertRaises(DatasetFormatError):
                load_mnist_idx(images, labels)


class TestCIFAR(unittest.TestCase):
    def test_parse(self):
        images, labels = parse_cifar10(cifar_bytes([3, 7]))
        self.assertEqual(images.shape, (2, 3, 32, 32))
        np.testing.assert_array_equal(labels, [3, 7])
        self.assertEqual(images[1].max(), 1)

    def test_partial_record(self):
        raw = cifar_bytes([1, 2])
        with self.assertRaises(DatasetFormatError) as cm:
            parse_cifar10(raw[:-10])
        self.assertEqual(cm.exception.offset, CIFAR_RECORD_SIZE)

    def test_bad_label(self):
        with self.assertRaises(DatasetFormatError) as cm:
            parse_cifar10(cifar_bytes([1, 12]))
        self.assertEqual(cm.exception.offset, CIFAR_RECORD_SIZE)

    def test_load_batches(self):
        with tempfile.TemporaryDirectory() as tmp:
            paths = []
            for i in range(2):
                p = Path(tmp) / f"data_batch_{i + 1}.bin"
                p.write_bytes(cifar_bytes([i, i + 1]))
                paths.append(p)
            ds = load_cifar10_bin(paths)
            self.assertEqual(len(ds), 4)
            np.testing.assert_array_equal(ds.targets, [0, 1, 1, 2])


if __name__ == "__main__":
    unittest.main()
