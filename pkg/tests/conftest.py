import os
import struct
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

MNIST_DIR = Path(os.environ.get("NESTDROP_MNIST_DIR", "/root/data/mnist"))
MNIST_FILES = {
    "train_images": "train-images.idx3-ubyte",
    "train_labels": "train-labels.idx1-ubyte",
    "test_images": "t10k-images.idx3-ubyte",
    "test_labels": "t10k-labels.idx1-ubyte",
}


def mnist_paths():
    paths = {k: MNIST_DIR / v for k, v in MNIST_FILES.items()}
    if all(p.exists() for p in paths.values()):
        return paths
    return None


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def write_idx_images(path, pixels):
    pixels = np.asarray(pixels, dtype=np.uint8)
    n, h, w = pixels.shape
    Path(path).write_bytes(struct.pack(">IIII", 0x00000803, n, h, w) + pixels.tobytes())


def write_idx_labels(path, labels):
    labels = np.asarray(labels, dtype=np.uint8)
    Path(path).write_bytes(struct.pack(">II", 0x00000801, len(labels)) + labels.tobytes())


def synthetic_pixels(n, size=8, classes=3, seed=0):
    """Learnable toy images: a class-specific bright bar plus noise."""
    r = np.random.default_rng(seed)
    labels = r.integers(0, classes, n)
    img = r.integers(0, 60, (n, size, size))
    for i, c in enumerate(labels):
        if c == 0:
            img[i, size // 2 - 1 : size // 2 + 1, :] += 180
        elif c == 1:
            img[i, :, size // 2 - 1 : size // 2 + 1] += 180
        else:
            np.fill_diagonal(img[i], 240)
    return np.clip(img, 0, 255).astype(np.uint8), labels.astype(np.uint8)


def make_toy_idx(d):
    """Tiny IDX-format dataset on disk (train 300, test 90, 8x8, 3 classes)."""
    d = Path(d)
    d.mkdir(parents=True, exist_ok=True)
    tr_x, tr_y = synthetic_pixels(300, seed=1)
    te_x, te_y = synthetic_pixels(90, seed=2)
    write_idx_images(d / "train-images", tr_x)
    write_idx_labels(d / "train-labels", tr_y)
    write_idx_images(d / "test-images", te_x)
    write_idx_labels(d / "test-labels", te_y)
    return d


def toy_spec_dict(width=4):
    return {
        "input_shape": [1, 8, 8],
        "layers": [
            {"kind": "conv", "name": "conv1", "num_output": width, "kernel": 3, "pad": 1, "weight_std": 0.1},
            {"kind": "pool", "name": "pool1", "kernel": 2, "stride": 2},
            {"kind": "relu", "name": "relu1"},
            {"kind": "fc", "name": "fc1", "num_output": 16, "weight_std": 0.1},
            {"kind": "relu", "name": "relu2"},
            {"kind": "fc", "name": "fc2", "num_output": 3, "weight_std": 0.1},
        ],
    }


def toy_config_dict(data_dir, out_dir):
    data_dir = Path(data_dir)
    return {
        "network": {"spec": toy_spec_dict()},
        "dataset": {
            "format": "mnist",
            "train_images": str(data_dir / "train-images"),
            "train_labels": str(data_dir / "train-labels"),
            "test_images": str(data_dir / "test-images"),
            "test_labels": str(data_dir / "test-labels"),
        },
        "solver": {"base_lr": 0.05, "momentum": 0.9, "weight_decay": 0.0005, "batch_size": 20,
                   "max_iters": 120, "sweep_interval": 25, "rng_seed": 7},
        "nested_dropout": {"layer": "conv1", "rho": 0.3},
        "oracle": {"k_list": [1, 2, 4]},
        "output": {"dir": str(out_dir)},
    }


@pytest.fixture
def toy_idx(tmp_path):
    return make_toy_idx(tmp_path / "toy")


@pytest.fixture
def toy_config(toy_idx, tmp_path):
    from nestdrop.experiment import ExperimentConfig

    return ExperimentConfig.from_dict(toy_config_dict(toy_idx, tmp_path / "run"), base_dir=tmp_path)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS

    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for crit, verdict, detail in RESULTS:
        terminalreporter.write_line(f"criterion {crit}: {verdict} - {detail}")
