"""Command line surface: train, sweep-k, eval, visualize.

Config files are plain key=value text mirroring the hyperparameter table;
every value can be overridden from the command line. Exit codes: 0 success,
2 configuration problems, 1 runtime failures.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import nets
from .bsgc import bsgc, load_assignment, weight_similarity
from .data import DataFormatError
from .enmeshment import enmeshment
from .pipeline import (ConfigError, TrainConfig, load_datasets, run_full,
                       run_phase1, config_snapshot)

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2

_INT_KEYS = {"batch_size", "k", "warmup_epochs", "main_epochs", "seed",
             "clustered_layer", "synthetic_train_per_class", "synthetic_test_per_class"}
_FLOAT_KEYS = {"lr", "lambda"}
_LIST_KEYS = {"cifar_train", "cifar_test"}


def parse_config_file(path) -> TrainConfig:
    """key=value lines, # comments; 'lambda' maps onto the lam field."""
    if not Path(path).exists():
        raise ConfigError(f"config file not found: {path}")
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key] = value
    return apply_overrides(TrainConfig(), values)


def apply_overrides(config: TrainConfig, values: dict) -> TrainConfig:
    fields = {f.name for f in dataclasses.fields(TrainConfig)}
    for key, value in values.items():
        field = "lam" if key == "lambda" else key
        if field not in fields:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            if key in _INT_KEYS:
                value = int(value)
            elif key in _FLOAT_KEYS:
                value = float(value)
            elif key in _LIST_KEYS:
                value = [p.strip() for p in str(value).split(",") if p.strip()]
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {exc}") from exc
        setattr(config, field, value)
    config.validate()
    return config


def _config_from_args(args) -> TrainConfig:
    config = parse_config_file(args.config) if args.config else TrainConfig()
    overrides = {}
    for key in ("seed", "batch_size", "lr", "k", "warmup_epochs", "main_epochs",
                "clustered_layer", "similarity", "arch", "dataset"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    if getattr(args, "lam", None) is not None:
        overrides["lambda"] = args.lam
    return apply_overrides(config, overrides)


def cmd_train(args) -> int:
    config = _config_from_args(args)
    record = run_full(config, args.out, resume=args.resume)
    final_e = record.final_enmeshment()
    print(f"run complete: {len(record.epochs)} epochs, "
          f"final E={final_e if final_e is None else format(final_e, '.4f')}, "
          f"final test accuracy={record.final_accuracy():.4f}")
    print(f"manifest: {record.artifacts['manifest']}")
    return EXIT_OK


def cmd_sweep_k(args) -> int:
    """Clusterability of a plain-trained model as the cluster count grows."""
    from . import figures

    config = _config_from_args(args)
    config.lam = 0.0
    ks = [int(p) for p in args.k_list.split(",") if p.strip()]
    if not ks or any(k < 1 for k in ks):
        raise ConfigError(f"bad k list {args.k_list!r}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if args.checkpoint:
        net, _ = nets.load_checkpoint(args.checkpoint)
    else:
        train, test = load_datasets(config)
        epochs = config.warmup_epochs + config.main_epochs
        plain = dataclasses.replace(config, warmup_epochs=epochs, main_epochs=0)
        net, _, _ = run_phase1(plain, train, test)
        nets.save_checkpoint(net, out / "checkpoint_plain.npz", config.seed)

    layer_index = config.resolve_clustered_layer(net)
    w_io = net.layers[layer_index].weight.T
    rows = ["k,enmeshment"]
    es = []
    for k in ks:
        assignment = bsgc(weight_similarity(w_io), k, config.seed, layer_index)
        e = enmeshment(w_io, assignment).e
        es.append(e)
        rows.append(f"{k},{e:.12g}")
        print(f"k={k}  E={e:.4f}")
    (out / "sweep.csv").write_text("\n".join(rows) + "\n")
    figures.ksweep_figure(ks, es, out / "sweep.png")
    return EXIT_OK


def cmd_eval(args) -> int:
    from . import figures
    from .evaluation import (ablation_report, circuit_report, save_ablation_csv,
                             save_circuit_csv)

    config = _config_from_args(args)
    net, _ = nets.load_checkpoint(args.checkpoint)
    assignment = load_assignment(args.assignment)
    layer = net.layers[assignment.layer_index]
    if layer.kind != "linear" or layer.weight.shape != (
            len(assignment.v_labels), len(assignment.u_labels)):
        raise ConfigError("assignment does not match the checkpoint's clustered layer")
    _, test = load_datasets(config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    report = ablation_report(net, assignment, test)
    save_ablation_csv(report, out / "ablation.csv")
    figures.ablation_heatmap(report, out / "ablation.png")

    labels = None
    if args.labels:
        labels = [int(p) for p in args.labels.split(",") if p.strip()]
    circuits = circuit_report(net, test, labels=labels, model_tag=args.model_tag)
    save_circuit_csv([circuits], out / "ecs.csv")
    print(f"evaluation written to {out}")
    return EXIT_OK


def cmd_visualize(args) -> int:
    from . import figures

    net, _ = nets.load_checkpoint(args.checkpoint)
    assignment = load_assignment(args.assignment)
    layer = net.layers[assignment.layer_index]
    if layer.kind != "linear" or layer.weight.shape != (
            len(assignment.v_labels), len(assignment.u_labels)):
        raise ConfigError("assignment does not match the checkpoint's clustered layer")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "clustered_layer.png"
    figures.weight_matrix_figure(layer.weight.T, assignment, path)
    print(f"wrote {path}")
    return EXIT_OK


def _add_common(parser):
    parser.add_argument("--config", help="key=value config file")
    parser.add_argument("--out", default="runs/out", help="output directory")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--arch", choices=[nets.ARCH_MLP_MNIST, nets.ARCH_CNN_CIFAR])
    parser.add_argument("--dataset", choices=["mnist", "cifar10", "synthetic"])
    parser.add_argument("--batch-size", dest="batch_size", type=int)
    parser.add_argument("--lr", type=float)
    parser.add_argument("--lambda", dest="lam", type=float)
    parser.add_argument("--k", type=int)
    parser.add_argument("--warmup-epochs", dest="warmup_epochs", type=int)
    parser.add_argument("--main-epochs", dest="main_epochs", type=int)
    parser.add_argument("--clustered-layer", dest="clustered_layer", type=int)
    parser.add_argument("--similarity", choices=["weight", "gradient"])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="modnet",
        description="Train modular networks with an enmeshment penalty and "
                    "measure cluster specialization and circuit size.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run the full three-phase pipeline")
    _add_common(p_train)
    p_train.add_argument("--resume", action="store_true",
                         help="reuse phase-1 artifacts left in --out")
    p_train.set_defaults(func=cmd_train)

    p_sweep = sub.add_parser("sweep-k", help="enmeshment of a plain model vs k")
    _add_common(p_sweep)
    p_sweep.add_argument("--k-list", default="2,3,4,5,6,7,8",
                         help="comma-separated cluster counts")
    p_sweep.add_argument("--checkpoint", help="reuse an existing plain checkpoint")
    p_sweep.set_defaults(func=cmd_sweep_k)

    p_eval = sub.add_parser("eval", help="ablation and circuit-size reports")
    _add_common(p_eval)
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--assignment", required=True)
    p_eval.add_argument("--labels", help="restrict ECS to these labels, e.g. 3,7")
    p_eval.add_argument("--model-tag", dest="model_tag", default="clustered")
    p_eval.set_defaults(func=cmd_eval)

    p_vis = sub.add_parser("visualize", help="clustered-layer weight image")
    _add_common(p_vis)
    p_vis.add_argument("--checkpoint", required=True)
    p_vis.add_argument("--assignment", required=True)
    p_vis.set_defaults(func=cmd_visualize)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataFormatError, nets.CheckpointError, ValueError, OSError,
            FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
