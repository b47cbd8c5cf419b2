"""
Capacity curves on MNIST
========================

Runs the whole comparison at desk scale through the experiment API: one
network trained with nested dropout on conv1, a plain baseline evaluated with
its trailing filters removed, and separately trained narrow networks. The
three curves are written as CSV and drawn into one SVG.

Needs the MNIST IDX files; point NESTDROP_MNIST_DIR at them. Takes about
fifteen minutes on a laptop CPU. Pass a smaller iteration count as the first
argument for a quick look.
"""

import os
import sys
from pathlib import Path

from nestdrop.curves import plot_curves, select_capacity
from nestdrop.experiment import (
    ExperimentConfig,
    cmd_brain_damage,
    cmd_k_sweep,
    cmd_oracle,
    cmd_train,
    cost_report,
)

mnist = Path(os.environ.get("NESTDROP_MNIST_DIR", "/root/data/mnist"))
iters = int(sys.argv[1]) if len(sys.argv) > 1 else 6000
out = Path(sys.argv[2] if len(sys.argv) > 2 else "capacity_demo")

cfg = ExperimentConfig.from_dict({
    "network": {"preset": "mnist_desk"},
    "dataset": {
        "format": "mnist",
        "train_images": str(mnist / "train-images.idx3-ubyte"),
        "train_labels": str(mnist / "train-labels.idx1-ubyte"),
        "test_images": str(mnist / "t10k-images.idx3-ubyte"),
        "test_labels": str(mnist / "t10k-labels.idx1-ubyte"),
        "train_subset": 10000,
    },
    "solver": {"base_lr": 0.05, "momentum": 0.9, "weight_decay": 0.0005,
               "max_iters": iters, "sweep_interval": max(iters // 20, 1)},
    "nested_dropout": {"layer": "conv1", "rho": 0.15},
    "oracle": {"k_list": [4, 8, 12, 16]},
    "output": {"dir": str(out)},
})
data = cfg.load_datasets()

nested = cmd_k_sweep(cmd_train(cfg, out / "nested", data), data[1])
brain = cmd_brain_damage(cmd_train(cfg, out / "baseline", data, nested=False), data[1])
oracle, total = cmd_oracle(cfg, run_dir=out / "oracle", datasets=data)

for k in (1, 2, 4, 8, 12, 16):
    print(f"k={k:2d}  nested {nested.at(k):.4f}  brain damage {brain.at(k):.4f}")
print("oracle:", dict(zip(oracle.ks, oracle.accuracies)))
print("selected k*:", select_capacity(nested, 0.005))
print(cost_report(nested.total_iterations, total))

svg = plot_curves([out / "nested" / "k_sweep.csv", out / "baseline" / "brain_damage_trained.csv",
                   out / "oracle" / "oracle.csv"], out / "capacity.svg",
                  labels=["nested dropout", "brain damage", "oracle"])
print("wrote", svg)
