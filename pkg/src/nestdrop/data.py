"""Parsers for the CIFAR-10 binary and MNIST IDX formats."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InconsistentDataError, MalformedFileError

CIFAR_RECORD = 3073
CIFAR_SHAPE = (3, 32, 32)
IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    images: np.ndarray  # [N, C, H, W]
    labels: np.ndarray  # [N]
    meta: dict = field(default_factory=dict)
    num_classes: int = 10

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise InconsistentDataError(
                f"{self.images.shape[0]} images but {self.labels.shape[0]} labels"
            )

    def __len__(self):
        return self.labels.shape[0]

    def subset(self, count):
        """First ``count`` examples (all of them when ``count`` is None)."""
        if count is None or count >= len(self):
            return self
        return Dataset(self.images[:count], self.labels[:count], dict(self.meta, subset=int(count)),
                       self.num_classes)


def _read_cifar_file(path):
    raw = Path(path).read_bytes()
    if len(raw) == 0 or len(raw) % CIFAR_RECORD:
        raise MalformedFileError(
            f"{path}: size {len(raw)} is not a positive multiple of {CIFAR_RECORD}"
        )
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0]
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise MalformedFileError(f"{path}: record {bad[0]} has label byte {labels[bad[0]]}")
    return rec[:, 1:].reshape(-1, *CIFAR_SHAPE), labels


def load_cifar10(paths, mean=None, dtype=np.float32):
    """Load CIFAR-10 binary batches, scale to [0, 1], subtract the mean image.

    ``mean`` should be the training split's mean image when loading a test
    split; when omitted it is computed from the files being loaded.
    """
    if isinstance(paths, (str, Path)):
        paths = [paths]
    parts = [_read_cifar_file(p) for p in paths]
    pixels = np.concatenate([p[0] for p in parts])
    labels = np.concatenate([p[1] for p in parts]).astype(np.int64)
    images = pixels.astype(dtype) / dtype(255)
    if mean is None:
        mean = images.mean(axis=0, dtype=np.float64).astype(dtype)
    mean = np.asarray(mean, dtype=dtype)
    if mean.shape != CIFAR_SHAPE:
        raise InconsistentDataError(f"mean image shape {mean.shape} != {CIFAR_SHAPE}")
    images -= mean
    meta = {"source": "cifar10", "files": [str(p) for p in paths], "scale": 1 / 255,
            "mean_image": mean}
    return Dataset(images, labels, meta)


def _read_idx(path, magic, ndim):
    raw = Path(path).read_bytes()
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise MalformedFileError(f"{path}: truncated header ({len(raw)} bytes)")
    got = struct.unpack(">I", raw[:4])[0]
    if got != magic:
        raise MalformedFileError(f"{path}: magic 0x{got:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = header + int(np.prod(dims))
    if len(raw) != expected:
        raise MalformedFileError(f"{path}: {len(raw)} bytes, header implies {expected}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_mnist_idx(images_path, labels_path, dtype=np.float32):
    pixels = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1).astype(np.int64)
    if pixels.shape[0] != labels.shape[0]:
        raise InconsistentDataError(
            f"{images_path} has {pixels.shape[0]} images, {labels_path} has {labels.shape[0]} labels"
        )
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise MalformedFileError(f"{labels_path}: record {bad[0]} has label {labels[bad[0]]}")
    images = (pixels.astype(dtype) / dtype(255))[:, None, :, :]
    meta = {"source": "mnist", "files": [str(images_path), str(labels_path)], "scale": 1 / 255}
    return Dataset(images, labels, meta)
