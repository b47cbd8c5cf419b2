"""Command-line driver: ``nestdrop <subcommand> ...``.

Exit codes: 0 success, 2 config error, 3 data error, 4 divergence,
5 protocol error. Failures print one JSON object on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import experiment as ex
from .curves import plot_curves, select_capacity
from .errors import ConfigError, DataError, NestDropError


def _load_config(args, required=True):
    path = args.config
    if path is None and getattr(args, "run_dir", None):
        candidate = Path(args.run_dir) / "config.json"
        if candidate.exists():
            path = candidate
    if path is None:
        if required:
            raise ConfigError("--config is required")
        return None
    cfg = ex.ExperimentConfig.load(path)
    if args.seed is not None:
        cfg.solver["rng_seed"] = args.seed
        cfg.solver_config()
    if args.eval_subset is not None:
        cfg.dataset["eval_subset"] = args.eval_subset
    return cfg


def _eval_set(cfg):
    return cfg.load_datasets()[1]


def _print_curve(curve, epsilon):
    for r in curve.rows:
        print(f"k={r.k:3d} accuracy={r.accuracy:.4f}")
    print(f"selected k*={select_capacity(curve, epsilon)} at epsilon={epsilon}")


def cmd_train(args):
    cfg = _load_config(args)
    run_dir = ex.cmd_train(cfg, args.run_dir)
    run = ex.read_run(run_dir)
    print(f"run {run_dir}: {run['total_iterations']} iterations, {len(run['sweeps'])} sweep checkpoints")
    for w in run["warnings"]:
        print(f"warning: {w}", file=sys.stderr)


def cmd_k_sweep(args):
    if not args.run_dir:
        raise ConfigError("--run-dir is required")
    cfg = _load_config(args)
    curve = ex.cmd_k_sweep(args.run_dir, _eval_set(cfg), args.out)
    _print_curve(curve, args.epsilon)


def cmd_brain_damage(args):
    if not args.run_dir:
        raise ConfigError("--run-dir is required")
    cfg = _load_config(args)
    curve = ex.cmd_brain_damage(args.run_dir, _eval_set(cfg), args.order, args.out)
    _print_curve(curve, args.epsilon)


def cmd_oracle(args):
    cfg = _load_config(args)
    k_list = [int(k) for k in args.k_list.split(",")] if args.k_list else None
    curve, total = ex.cmd_oracle(cfg, k_list, args.run_dir)
    _print_curve(curve, args.epsilon)
    per_run = cfg.solver_config().max_iters
    rep = ex.cost_report(per_run, total)
    print(f"oracle total iterations={rep['oracle_iterations']} "
          f"single nested run={rep['nested_iterations']} ratio={rep['ratio']:.4f}")


def cmd_layerwise(args):
    cfg = _load_config(args)
    rep = ex.cmd_layerwise(cfg, args.epsilon, run_dir=args.run_dir)
    for st in rep["layers"]:
        print(f"{st['layer']}: {st['original']} -> {st['selected']} filters "
              f"(accuracy {st['accuracy_at_selected']:.4f})")
    print(f"filters {rep['filters_before']} -> {rep['filters_after']} "
          f"({100 * rep['filter_reduction']:.1f}% fewer); parameters {rep['params_before']} -> {rep['params_after']}")


def cmd_plot(args):
    out = plot_curves(args.curves, args.out, args.labels.split(",") if args.labels else None)
    print(out)


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="experiment JSON config")
    common.add_argument("--run-dir", type=Path, help="run directory")
    common.add_argument("--epsilon", type=float, default=0.005, help="capacity selection tolerance")
    common.add_argument("--seed", type=int, help="override solver.rng_seed")
    common.add_argument("--eval-subset", type=int, help="evaluate on the first N test examples")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="nestdrop", description="Nested dropout capacity discovery for CNNs.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train one network").set_defaults(func=cmd_train)
    s = sub.add_parser("k-sweep", parents=[common], help="truncated evaluation per sweep checkpoint")
    s.add_argument("--out", type=Path, help="curve CSV (default <run-dir>/k_sweep.csv)")
    s.set_defaults(func=cmd_k_sweep)
    s = sub.add_parser("brain-damage", parents=[common], help="mask filters of a plain baseline")
    s.add_argument("--order", choices=("trained", "norm"), default="trained")
    s.add_argument("--out", type=Path)
    s.set_defaults(func=cmd_brain_damage)
    s = sub.add_parser("oracle", parents=[common], help="train one network per filter count")
    s.add_argument("--k-list", help="comma-separated filter counts (default oracle.k_list)")
    s.set_defaults(func=cmd_oracle)
    sub.add_parser("layerwise", parents=[common], help="fix layer widths one at a time").set_defaults(
        func=cmd_layerwise)
    s = sub.add_parser("plot", parents=[common], help="render curve CSVs to SVG")
    s.add_argument("curves", nargs="+", type=Path)
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--labels", help="comma-separated legend labels")
    s.set_defaults(func=cmd_plot)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except NestDropError as exc:
        err = {"error": type(exc).__name__, "exit_code": exc.exit_code, "message": str(exc)}
        print(json.dumps(err), file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        err = {"error": type(exc).__name__, "exit_code": DataError.exit_code, "message": str(exc)}
        print(json.dumps(err), file=sys.stderr)
        return DataError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
