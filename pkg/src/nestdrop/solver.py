"""SGD with momentum, unit sweeping and filter freezing.

The sweep index of every nested-dropout layer advances by one each
``sweep_interval`` iterations. Once a unit is swept its filter in the layer
feeding the nested-dropout layer (weights, bias entry and momentum buffer)
is frozen: after every optimiser step the frozen slices are restored to their
pre-step values, so neither momentum nor weight decay can move them.
"""

from __future__ import annotations

import copy
import csv
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, save_checkpoint
from .errors import ConfigError, DivergenceError, InvalidShapeError
from .layers import softmax_xent
from .network import backward, forward, make_nd_states
from .nested_dropout import NestedDropoutState

log = logging.getLogger(__name__)

# independent RNG streams derived from the run seed
STREAM_INIT, STREAM_ND, STREAM_DROPOUT, STREAM_SHUFFLE = range(4)


@dataclass
class SolverConfig:
    base_lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 100
    max_iters: int = 1000
    sweep_interval: int = 1000
    rng_seed: int = 0
    dtype: str = "float32"
    checkpoint_dir: str | None = None
    log_path: str | None = None

    def __post_init__(self):
        if not self.base_lr > 0:
            raise ConfigError(f"solver.base_lr must be positive, got {self.base_lr}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"solver.momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError(f"solver.weight_decay must be >= 0, got {self.weight_decay}")
        for name in ("batch_size", "sweep_interval"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"solver.{name} must be a positive integer")
        if self.max_iters < 0:
            raise ConfigError("solver.max_iters must be >= 0")
        if not 0 <= self.rng_seed < 2**64:
            raise ConfigError("solver.rng_seed must be an unsigned 64-bit integer")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"solver.dtype must be float32 or float64, got {self.dtype!r}")

    def echo(self):
        """Run-defining fields (no filesystem paths)."""
        d = asdict(self)
        d.pop("checkpoint_dir")
        d.pop("log_path")
        return d


@dataclass
class TrainState:
    iteration: int
    params: dict
    velocity: dict
    nd_states: dict = field(default_factory=dict)
    freeze: dict = field(default_factory=dict)
    rngs: dict = field(default_factory=dict)


def stream(seed, *key):
    return np.random.default_rng(np.random.SeedSequence([int(seed), *key]))


def init_params(spec, rng, dtype=np.float32):
    """Gaussian weights with each layer's ``weight_std``, zero biases."""
    params = {}
    shapes = spec.param_shapes()
    for l in spec.param_layers():
        w_shape, b_shape = shapes[l.name]
        if l.weight_std == 0:
            w = np.zeros(w_shape, dtype=dtype)
        else:
            w = (rng.standard_normal(w_shape) * l.weight_std).astype(dtype)
        params[l.name] = {"weights": w, "bias": np.zeros(b_shape, dtype=dtype)}
    return params


def zeros_like_tree(tree):
    return {k: {p: np.zeros_like(v) for p, v in d.items()} for k, d in tree.items()}


def copy_tree(tree):
    return {k: {p: v.copy() for p, v in d.items()} for k, d in tree.items()}


def initial_state(spec, config: SolverConfig, params=None):
    dtype = np.dtype(config.dtype)
    if params is None:
        params = init_params(spec, stream(config.rng_seed, STREAM_INIT), dtype)
    else:
        params = {k: {p: np.asarray(v, dtype=dtype).copy() for p, v in d.items()}
                  for k, d in params.items()}
    shapes = spec.param_shapes()
    for name, (w, b) in shapes.items():
        if name not in params or params[name]["weights"].shape != w or params[name]["bias"].shape != b:
            raise ConfigError(f"initial parameters for {name!r} do not match the network spec")
    nd_states = make_nd_states(spec)
    return TrainState(
        iteration=0,
        params=params,
        velocity=zeros_like_tree(params),
        nd_states=nd_states,
        freeze={spec.attached_layer(n): 0 for n in nd_states},
        rngs={"nd": stream(config.rng_seed, STREAM_ND), "dropout": stream(config.rng_seed, STREAM_DROPOUT)},
    )


def sgd_step(state: TrainState, grads, config: SolverConfig):
    """One momentum SGD update in place; frozen leading filters are restored afterwards."""
    lr, mom, wd = config.base_lr, config.momentum, config.weight_decay
    for lname, pdict in state.params.items():
        if lname not in grads:
            raise InvalidShapeError(f"no gradient for layer {lname!r}")
        f = state.freeze.get(lname, 0)
        for pname, w in pdict.items():
            g = grads[lname][pname]
            if g.shape != w.shape:
                raise InvalidShapeError(f"gradient {lname}.{pname} has shape {g.shape}, expected {w.shape}")
            v = state.velocity[lname][pname]
            if f:
                saved_w, saved_v = w[:f].copy(), v[:f].copy()
            v *= mom
            v -= lr * (g + wd * w) if wd else lr * g
            w += v
            if f:
                w[:f] = saved_w
                v[:f] = saved_v
    return state


def sweep_tick(state: TrainState, config: SolverConfig, spec=None):
    """Advance sweep indices on interval boundaries; returns ``(state, events)``."""
    events = []
    it = state.iteration
    if it > 0 and it % config.sweep_interval == 0:
        for name, nd in state.nd_states.items():
            if nd.s < nd.n:
                nd.s += 1
                layer = spec.attached_layer(name) if spec is not None else _attached_from_freeze(state, name)
                state.freeze[layer] = nd.s
                events.append({"iteration": it, "nd_layer": name, "layer": layer, "s": nd.s})
    return state, events


def _attached_from_freeze(state, nd_name):
    guess = nd_name[3:] if nd_name.startswith("nd_") else nd_name
    if guess in state.freeze:
        return guess
    raise ConfigError(f"cannot tell which layer {nd_name!r} is attached to; pass spec")


@lru_cache(maxsize=8)
def _epoch_order(seed, n, epoch):
    return stream(seed, STREAM_SHUFFLE, epoch).permutation(n)


def batch_indices(seed, n, iteration, batch_size):
    """Sample indices of minibatch ``iteration`` under epoch-wise seeded shuffles."""
    g = iteration * batch_size + np.arange(batch_size)
    epochs, pos = np.divmod(g, n)
    out = np.empty(batch_size, dtype=np.int64)
    for e in np.unique(epochs):
        sel = epochs == e
        out[sel] = _epoch_order(int(seed), int(n), int(e))[pos[sel]]
    return out


def make_checkpoint(spec, state: TrainState, config: SolverConfig, label):
    return Checkpoint(
        network=spec,
        params=copy_tree(state.params),
        velocity=copy_tree(state.velocity),
        iteration=state.iteration,
        nd_states={k: {"n": v.n, "s": v.s, "rho": v.rho, "scale": v.scale} for k, v in state.nd_states.items()},
        freeze=dict(state.freeze),
        rng_states={k: copy.deepcopy(r.bit_generator.state) for k, r in state.rngs.items()},
        solver=config.echo(),
        label=label,
    )


def state_from_checkpoint(ckpt: Checkpoint):
    rngs = {}
    for name, st in ckpt.rng_states.items():
        bg = getattr(np.random, st["bit_generator"])()
        bg.state = st
        rngs[name] = np.random.Generator(bg)
    return TrainState(
        iteration=ckpt.iteration,
        params=copy_tree(ckpt.params),
        velocity=copy_tree(ckpt.velocity),
        nd_states={k: NestedDropoutState(n=v["n"], s=v["s"], rho=v["rho"], scale=v["scale"])
                   for k, v in ckpt.nd_states.items()},
        freeze=dict(ckpt.freeze),
        rngs=rngs,
    )


def sweep_label(state, event):
    if len(state.nd_states) == 1:
        return f"k{event['s']:03d}"
    return f"{event['nd_layer']}_k{event['s']:03d}"


def _check_dataset(spec, dataset):
    if len(dataset) == 0:
        raise ConfigError("training dataset is empty")
    if tuple(dataset.images.shape[1:]) != spec.input_shape:
        raise ConfigError(
            f"dataset images have shape {dataset.images.shape[1:]}, network expects {spec.input_shape}"
        )
    if dataset.labels.max() >= spec.num_classes or dataset.labels.min() < 0:
        raise ConfigError(f"dataset labels exceed the network's {spec.num_classes} classes")


def train_loop(spec, dataset, config: SolverConfig, state: TrainState | None = None, init=None):
    """Train until ``config.max_iters``; returns ``(state, log_rows, checkpoints)``.

    ``state`` resumes a previous run (see :func:`state_from_checkpoint`);
    ``init`` supplies starting parameters for a fresh run. A checkpoint is
    produced at every sweep event and at the final iteration; with
    ``config.checkpoint_dir`` set each is also written as ``<label>.ndck``.
    """
    _check_dataset(spec, dataset)
    if state is None:
        state = initial_state(spec, config, init)
    for name, nd in state.nd_states.items():
        if config.sweep_interval * (nd.n - nd.s) > config.max_iters - state.iteration:
            warnings.warn(
                f"{name}: {nd.n - nd.s} units at interval {config.sweep_interval} need more than "
                f"the remaining {config.max_iters - state.iteration} iterations; later units will not be swept",
                stacklevel=2,
            )
    dtype = np.dtype(config.dtype)
    images = dataset.images.astype(dtype, copy=False)
    labels = dataset.labels
    n = len(dataset)
    rows = []
    checkpoints = []
    ckpt_dir = Path(config.checkpoint_dir) if config.checkpoint_dir else None

    def emit(label):
        ck = make_checkpoint(spec, state, config, label)
        if ckpt_dir is not None:
            save_checkpoint(ck, ckpt_dir / f"{label}.ndck")
        checkpoints.append(ck)

    while state.iteration < config.max_iters:
        idx = batch_indices(config.rng_seed, n, state.iteration, config.batch_size)
        logits, tape = forward(spec, state.params, images[idx], train=True, nd_states=state.nd_states,
                               nd_rng=state.rngs["nd"], dropout_rng=state.rngs["dropout"])
        loss, grad = softmax_xent(logits, labels[idx])
        if not math.isfinite(loss):
            raise DivergenceError(state.iteration + 1, loss)
        grads = backward(spec, state.params, tape, grad, state.nd_states)
        sgd_step(state, grads, config)
        state.iteration += 1
        sweep = next(iter(state.nd_states.values())).s if state.nd_states else 0
        rows.append((state.iteration, loss, sweep, config.base_lr))
        state, events = sweep_tick(state, config, spec)
        for ev in events:
            log.info("iteration %d: %s swept to s=%d", ev["iteration"], ev["nd_layer"], ev["s"])
            emit(sweep_label(state, ev))
        if state.iteration == config.max_iters:
            emit("final")

    if config.log_path:
        write_log(rows, config.log_path)
    return state, rows, checkpoints


def write_log(rows, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iter", "loss", "sweep_index", "lr"])
        for it, loss, s, lr in rows:
            w.writerow([it, repr(float(loss)), s, repr(float(lr))])
