"""
Unit sweeping on a toy problem
==============================

A small conv net is trained with nested dropout on its first layer. Every
few iterations the sweep index moves on by one and that filter is frozen.
The checkpoint taken at each sweep is then evaluated with only its first k
filters, giving accuracy as a function of k from a single run.
"""

import warnings

import numpy as np

from nestdrop.data import Dataset
from nestdrop.network import NetworkSpec, accuracy
from nestdrop.solver import SolverConfig, train_loop

rng = np.random.default_rng(1)


def bars(n):
    # three classes (horizontal bar, vertical bar, diagonal) under heavy noise
    y = rng.integers(0, 3, n)
    x = rng.integers(0, 160, (n, 8, 8)).astype(np.float32)
    for i, c in enumerate(y):
        if c == 0:
            x[i, 3:5, :] += 70
        elif c == 1:
            x[i, :, 3:5] += 70
        else:
            x[i][np.eye(8, dtype=bool)] += 70
    return Dataset(np.clip(x, 0, 255)[:, None] / 255, y, num_classes=3)


train, test = bars(600), bars(300)

spec = NetworkSpec.from_dict({
    "input_shape": [1, 8, 8],
    "layers": [
        {"kind": "conv", "name": "conv1", "num_output": 6, "kernel": 3, "pad": 1, "weight_std": 0.1},
        {"kind": "pool", "name": "pool1", "kernel": 2, "stride": 2},
        {"kind": "relu", "name": "relu1"},
        {"kind": "fc", "name": "fc1", "num_output": 16, "weight_std": 0.1},
        {"kind": "relu", "name": "relu2"},
        {"kind": "fc", "name": "fc2", "num_output": 3, "weight_std": 0.1},
    ],
}).with_nested_dropout("conv1", rho=0.3)

cfg = SolverConfig(base_lr=0.05, momentum=0.9, weight_decay=5e-4, batch_size=20,
                   max_iters=420, sweep_interval=60, rng_seed=0)
with warnings.catch_warnings():
    warnings.simplefilter("ignore")
    state, log, checkpoints = train_loop(spec, train, cfg)

print("loss every 60 iterations:", [round(r[1], 3) for r in log[59::60]])

for ck in checkpoints:
    s = ck.sweep_index()
    if ck.label == "final":
        acc = accuracy(spec, ck.params, test.images, test.labels)
    else:
        acc = accuracy(spec, ck.params, test.images, test.labels, truncate={"conv1": s})
    print(f"{ck.label:6s} iteration {ck.iteration:4d}  k={s}  accuracy {acc:.3f}")

# the first filter has not moved since it was swept at iteration 60
first = checkpoints[0].params["conv1"]["weights"][0]
print("filter 1 unchanged:", np.array_equal(first, state.params["conv1"]["weights"][0]))
