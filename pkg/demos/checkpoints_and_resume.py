"""
Checkpoints and resuming
========================

A checkpoint carries parameters, momentum buffers, sweep state and the RNG
positions, so a run stopped halfway and resumed ends bit-for-bit where an
uninterrupted run does.
"""

import tempfile
import warnings
from pathlib import Path

import numpy as np

from nestdrop.checkpoint import load_checkpoint, save_checkpoint, to_bytes, trees_equal
from nestdrop.data import Dataset
from nestdrop.network import mnist_desk
from nestdrop.solver import SolverConfig, state_from_checkpoint, train_loop

rng = np.random.default_rng(0)
data = Dataset(rng.random((200, 1, 28, 28), dtype=np.float32), rng.integers(0, 10, 200))
spec = mnist_desk(conv1=4, fc1=16).with_nested_dropout("conv1", rho=0.2)
cfg = SolverConfig(base_lr=0.01, batch_size=25, max_iters=40, sweep_interval=10)
half = SolverConfig(**{**cfg.echo(), "max_iters": 20})

# the short run warns that it stops before every unit is swept
warnings.simplefilter("ignore")

straight, _, _ = train_loop(spec, data, cfg)

tmp = Path(tempfile.mkdtemp())
_, _, cks = train_loop(spec, data, half)
save_checkpoint(cks[-1], tmp / "half.ndck")
print((tmp / "half.ndck").read_bytes()[:8], (tmp / "half.ndck").stat().st_size, "bytes")

ck = load_checkpoint(tmp / "half.ndck")
print("iteration", ck.iteration, "sweep index", ck.sweep_index(), "frozen", ck.freeze)
resumed, _, _ = train_loop(spec, data, cfg, state=state_from_checkpoint(ck))

print("resumed == straight:", trees_equal(resumed.params, straight.params))
print("save/load/save identical:", to_bytes(load_checkpoint(tmp / "half.ndck")) == to_bytes(ck))
