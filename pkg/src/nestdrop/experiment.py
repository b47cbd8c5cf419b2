"""Experiment protocol: training runs, truncated k-sweeps, baselines and the
layer-by-layer capacity search.

A run directory holds::

    config.json        normalised experiment configuration
    run.json           run summary (iterations, sweep checkpoints, target layer)
    train_log.csv      iter,loss,sweep_index,lr
    checkpoints/       k001.ndck ... and final.ndck

Nothing time- or host-dependent is written, so equal seeds give
byte-identical run directories.
"""

from __future__ import annotations

import copy
import json
import logging
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint
from .curves import CapacityCurve, CurveRow, select_capacity, write_curve
from .data import load_cifar10, load_mnist_idx
from .errors import ConfigError, ProtocolError
from .network import PRESETS, NetworkSpec, accuracy
from .solver import SolverConfig, train_loop, write_log

log = logging.getLogger(__name__)

CONFIG_KEYS = {"network", "dataset", "solver", "nested_dropout", "oracle", "layerwise", "output"}


@dataclass
class ExperimentConfig:
    network: dict
    dataset: dict
    solver: dict
    nested_dropout: dict = field(default_factory=dict)
    oracle: dict = field(default_factory=dict)
    layerwise: dict = field(default_factory=dict)
    output: dict = field(default_factory=dict)
    base_dir: str = "."

    @classmethod
    def from_dict(cls, d, base_dir="."):
        unknown = set(d) - CONFIG_KEYS
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        for key in ("network", "dataset", "solver"):
            if not isinstance(d.get(key), dict):
                raise ConfigError(f"config field {key!r} is required and must be an object")
        cfg = cls(**{k: copy.deepcopy(d.get(k) or {}) for k in CONFIG_KEYS}, base_dir=str(base_dir))
        cfg.build_spec()
        cfg.solver_config()
        return cfg

    @classmethod
    def load(cls, path):
        path = Path(path)
        try:
            d = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise ConfigError(f"config file {path} does not exist") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
        return cls.from_dict(d, base_dir=path.resolve().parent)

    def to_dict(self, resolve_paths=False):
        d = {k: copy.deepcopy(getattr(self, k)) for k in sorted(CONFIG_KEYS)}
        if resolve_paths:
            ds = d["dataset"]
            for key in ("train_images", "train_labels", "test_images", "test_labels"):
                if key in ds:
                    ds[key] = str(self.resolve(ds[key]).resolve())
            for key in ("train_files", "test_files"):
                if key in ds:
                    ds[key] = [str(self.resolve(p).resolve()) for p in ds[key]]
        return d

    # -- derived objects -------------------------------------------------
    @property
    def target_layer(self):
        return self.nested_dropout.get("layer", "conv1")

    @property
    def nd_enabled(self):
        return bool(self.nested_dropout) and self.nested_dropout.get("enabled", True)

    def base_spec(self):
        net = self.network
        if "spec" in net:
            spec = NetworkSpec.from_dict(net["spec"])
        else:
            preset = net.get("preset")
            if preset not in PRESETS:
                raise ConfigError(f"network.preset must be one of {sorted(PRESETS)}, got {preset!r}")
            try:
                spec = PRESETS[preset]()
            except TypeError as exc:
                raise ConfigError(f"network.preset: {exc}") from exc
        for name, width in (net.get("widths") or {}).items():
            spec = spec.with_width(name, int(width))
        for name, std in (net.get("weight_std") or {}).items():
            spec = _with_std(spec, name, float(std))
        return spec.without_nested_dropout()

    def build_spec(self, nested=None):
        spec = self.base_spec()
        if nested is None:
            nested = self.nd_enabled
        if nested:
            nd = self.nested_dropout
            try:
                rho = float(nd.get("rho", 0.1))
                spec = spec.with_nested_dropout(self.target_layer, rho=rho, scale=bool(nd.get("scale", False)))
            except ConfigError as exc:
                raise ConfigError(f"nested_dropout: {exc}") from exc
        return spec

    def solver_config(self, **overrides):
        d = dict(self.solver)
        d.update(overrides)
        try:
            return SolverConfig(**d)
        except TypeError as exc:
            raise ConfigError(f"solver: {exc}") from exc

    def resolve(self, p):
        p = Path(p)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def load_datasets(self):
        ds = self.dataset
        fmt = ds.get("format")
        if fmt == "mnist":
            keys = ("train_images", "train_labels", "test_images", "test_labels")
            paths = {k: self._existing(k, ds.get(k)) for k in keys}
            train = load_mnist_idx(paths["train_images"], paths["train_labels"])
            test = load_mnist_idx(paths["test_images"], paths["test_labels"])
        elif fmt == "cifar10":
            tr = [self._existing("train_files", p) for p in ds.get("train_files") or []]
            te = [self._existing("test_files", p) for p in ds.get("test_files") or []]
            if not tr or not te:
                raise ConfigError("dataset.train_files and dataset.test_files must be non-empty")
            train = load_cifar10(tr)
            test = load_cifar10(te, mean=train.meta["mean_image"])
        else:
            raise ConfigError(f"dataset.format must be 'mnist' or 'cifar10', got {fmt!r}")
        return train.subset(ds.get("train_subset")), test.subset(ds.get("eval_subset"))

    def _existing(self, key, p):
        if not p:
            raise ConfigError(f"dataset.{key} is required")
        path = self.resolve(p)
        if not path.exists():
            raise ConfigError(f"dataset.{key}: {path} does not exist")
        return path

    def output_dir(self):
        d = self.output.get("dir")
        if not d:
            raise ConfigError("output.dir is required when no run directory is given")
        return self.resolve(d)


def _with_std(spec, name, std):
    layers = tuple(replace(l, weight_std=std) if l.name == name else l for l in spec.layers)
    spec.layer(name)
    return NetworkSpec(spec.input_shape, layers)


# -- training ----------------------------------------------------------------

def cmd_train(config: ExperimentConfig, run_dir=None, datasets=None, nested=None, spec=None, init=None):
    """Train one network and write its run directory; returns the path."""
    run_dir = Path(run_dir) if run_dir else config.output_dir()
    train, _ = datasets or config.load_datasets()
    if spec is None:
        spec = config.build_spec(nested)
    solver = config.solver_config(checkpoint_dir=str(run_dir / "checkpoints"))
    run_dir.mkdir(parents=True, exist_ok=True)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        state, rows, ckpts = train_loop(spec, train, solver, init=init)
    for w in caught:
        log.warning("%s", w.message)
    write_log(rows, run_dir / "train_log.csv")
    nd = spec.nd_layers()
    summary = {
        "target_layer": spec.attached_layer(nd[0].name) if nd else config.target_layer,
        "nested_dropout": nd[0].name if nd else None,
        "n": spec.layer(spec.attached_layer(nd[0].name)).num_output if nd else None,
        "total_iterations": state.iteration,
        "sweeps": [{"k": c.sweep_index(), "checkpoint": f"checkpoints/{c.label}.ndck", "iteration": c.iteration}
                   for c in ckpts if c.label != "final"],
        "final": "checkpoints/final.ndck" if any(c.label == "final" for c in ckpts) else None,
        "warnings": [str(w.message) for w in caught],
    }
    (run_dir / "config.json").write_text(json.dumps(config.to_dict(resolve_paths=True), indent=2, sort_keys=True) + "\n")
    (run_dir / "run.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return run_dir


def read_run(run_dir):
    run_dir = Path(run_dir)
    try:
        run = json.loads((run_dir / "run.json").read_text())
    except FileNotFoundError as exc:
        raise ProtocolError(f"{run_dir} is not a run directory (no run.json)") from exc
    run["run_id"] = run_dir.resolve().name
    return run


def _load(run_dir, rel, k):
    path = Path(run_dir) / rel
    if not path.exists():
        raise ProtocolError(f"missing checkpoint for k={k}: {path}")
    return load_checkpoint(path)


def evaluate_checkpoint(ckpt, dataset, layer=None, k=None, keep=None):
    """Accuracy of a checkpoint, optionally keeping only some of ``layer``'s channels."""
    kw = {}
    if k is not None:
        kw["truncate"] = {layer: k}
    if keep is not None:
        kw["channel_keep"] = {layer: keep}
    return accuracy(ckpt.network, ckpt.params, dataset.images, dataset.labels, **kw)


def cmd_k_sweep(run_dir, eval_dataset, out_csv=None):
    """Truncated-evaluation curve of a nested-dropout run."""
    run_dir = Path(run_dir)
    run = read_run(run_dir)
    if run["nested_dropout"] is None:
        raise ProtocolError(f"{run_dir} was trained without nested dropout; use brain-damage")
    layer, n = run["target_layer"], run["n"]
    if run["final"] is None:
        raise ProtocolError(f"missing final checkpoint for k={n} in {run_dir}")
    rows = []
    for sw in run["sweeps"]:
        if sw["k"] >= n:
            continue
        ck = _load(run_dir, sw["checkpoint"], sw["k"])
        rows.append(CurveRow(sw["k"], evaluate_checkpoint(ck, eval_dataset, layer, sw["k"]),
                             Path(sw["checkpoint"]).name))
    final = _load(run_dir, run["final"], n)
    rows.append(CurveRow(n, evaluate_checkpoint(final, eval_dataset), Path(run["final"]).name))
    curve = CapacityCurve(rows, run_id=run["run_id"], total_iterations=run["total_iterations"])
    write_curve(curve, out_csv or run_dir / "k_sweep.csv")
    return curve


def filter_order(ckpt, layer, order="trained"):
    if order == "trained":
        return np.arange(ckpt.params[layer]["weights"].shape[0])
    if order == "norm":
        w = ckpt.params[layer]["weights"].astype(np.float64)
        norms = np.sqrt((w.reshape(w.shape[0], -1) ** 2).sum(axis=1))
        return np.argsort(-norms, kind="stable")
    raise ConfigError(f"unknown filter order {order!r}; use 'trained' or 'norm'")


def cmd_brain_damage(run_dir, eval_dataset, order="trained", out_csv=None):
    """Keep only k filters of an ordinarily trained network, for k = 1..n."""
    run_dir = Path(run_dir)
    run = read_run(run_dir)
    layer = run["target_layer"]
    if run["final"] is None:
        raise ProtocolError(f"missing final checkpoint in {run_dir}")
    ckpt = _load(run_dir, run["final"], "final")
    n = ckpt.params[layer]["weights"].shape[0]
    ranking = filter_order(ckpt, layer, order)
    rows = []
    for k in range(1, n + 1):
        if order == "trained":
            acc = evaluate_checkpoint(ckpt, eval_dataset, layer, k=k)
        else:
            acc = evaluate_checkpoint(ckpt, eval_dataset, layer, keep=np.sort(ranking[:k]))
        rows.append(CurveRow(k, acc, Path(run["final"]).name))
    curve = CapacityCurve(rows, run_id=f"{run['run_id']}-brain-damage", total_iterations=run["total_iterations"])
    write_curve(curve, out_csv or run_dir / f"brain_damage_{order}.csv")
    return curve


def cmd_oracle(config: ExperimentConfig, k_list=None, run_dir=None, datasets=None):
    """Train one plain network per width in ``k_list``; returns ``(curve, total_iterations)``."""
    k_list = sorted(int(k) for k in (k_list or config.oracle.get("k_list") or []))
    if not k_list:
        raise ConfigError("oracle.k_list must be a non-empty list of filter counts")
    layer = config.oracle.get("layer", config.target_layer)
    run_dir = Path(run_dir) if run_dir else config.output_dir()
    datasets = datasets or config.load_datasets()
    base = config.base_spec()
    rows, total = [], 0
    for k in k_list:
        sub = run_dir / f"oracle_k{k:03d}"
        cmd_train(config, sub, datasets, spec=base.with_width(layer, k))
        run = read_run(sub)
        total += run["total_iterations"]
        ck = _load(sub, run["final"], k)
        rows.append(CurveRow(k, evaluate_checkpoint(ck, datasets[1]), f"{sub.name}/{Path(run['final']).name}"))
    curve = CapacityCurve(rows, run_id=f"{run_dir.name}-oracle", total_iterations=total)
    write_curve(curve, run_dir / "oracle.csv")
    (run_dir / "oracle.json").write_text(json.dumps(
        {"k_list": k_list, "per_run_iterations": total // len(k_list), "total_iterations": total},
        indent=2, sort_keys=True) + "\n")
    return curve, total


def cost_report(nested_iterations, oracle_iterations):
    return {
        "nested_iterations": int(nested_iterations),
        "oracle_iterations": int(oracle_iterations),
        "ratio": nested_iterations / oracle_iterations if oracle_iterations else float("inf"),
    }


# -- layerwise ---------------------------------------------------------------

def truncate_network(spec, params, layer, k):
    """Physically remove all but the first ``k`` output channels of ``layer``.

    The consumer layer keeps only the weights reading the surviving channels,
    so the rebuilt network computes exactly what truncated evaluation does.
    """
    base = spec.without_nested_dropout()
    n = base.layer(layer).num_output
    if not 1 <= k <= n:
        raise ConfigError(f"cannot keep {k} of {n} filters in {layer!r}")
    new_spec = base.with_width(layer, k)
    new = {name: {p: v.copy() for p, v in d.items()} for name, d in params.items()}
    new[layer]["weights"] = np.ascontiguousarray(params[layer]["weights"][:k])
    new[layer]["bias"] = np.ascontiguousarray(params[layer]["bias"][:k])
    nxt = base.next_param_layer(layer)
    if nxt is not None:
        w = params[nxt]["weights"]
        if base.layer(nxt).kind == "conv":
            new[nxt]["weights"] = np.ascontiguousarray(w[:, :k])
        else:
            in_shape = base.input_shape_of(nxt)
            if len(in_shape) == 3:
                w4 = w.reshape(w.shape[0], *in_shape)
                new[nxt]["weights"] = np.ascontiguousarray(w4[:, :k].reshape(w.shape[0], -1))
            else:
                new[nxt]["weights"] = np.ascontiguousarray(w[:, :k])
    return new_spec, new


def _checkpoint_for(run_dir, run, k):
    if k == run["n"]:
        return _load(run_dir, run["final"], k)
    for sw in run["sweeps"]:
        if sw["k"] == k:
            return _load(run_dir, sw["checkpoint"], k)
    raise ProtocolError(f"missing checkpoint for k={k} in {run_dir}")


def cmd_layerwise(config: ExperimentConfig, epsilon=0.005, layers=None, run_dir=None, datasets=None):
    """Fix each target layer's width in turn with nested dropout."""
    layers = list(layers or config.layerwise.get("layers") or [config.target_layer])
    run_dir = Path(run_dir) if run_dir else config.output_dir()
    datasets = datasets or config.load_datasets()
    spec = config.base_spec()
    original = spec
    params = None
    stages = []
    nd = config.nested_dropout
    for i, layer in enumerate(layers):
        stage_dir = run_dir / f"stage{i + 1}_{layer}"
        nd_spec = spec.with_nested_dropout(layer, rho=float(nd.get("rho", 0.1)), scale=bool(nd.get("scale", False)))
        cmd_train(config, stage_dir, datasets, spec=nd_spec, init=params)
        curve = cmd_k_sweep(stage_dir, datasets[1])
        k_star = select_capacity(curve, epsilon)
        run = read_run(stage_dir)
        ck = _checkpoint_for(stage_dir, run, k_star)
        spec, params = truncate_network(ck.network, ck.params, layer, k_star)
        stages.append({"layer": layer, "original": original.layer(layer).num_output, "selected": k_star,
                       "accuracy_at_selected": curve.at(k_star), "curve": str(Path(stage_dir.name) / "k_sweep.csv"),
                       "iterations": run["total_iterations"]})
    before = sum(s["original"] for s in stages)
    after = sum(s["selected"] for s in stages)
    report = {
        "epsilon": epsilon,
        "layers": stages,
        "filters_before": before,
        "filters_after": after,
        "filter_reduction": 1 - after / before,
        "params_before": original.count_params(),
        "params_after": spec.count_params(),
        "final_spec": spec.to_dict(),
    }
    (run_dir / "layerwise.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return report
