"""Three-phase modular training: warmup on plain cross-entropy, cluster the
designated layer, then continue training with the enmeshment penalty added.

Every source of randomness flows from the single run seed: weight init uses
it directly, the shuffle of epoch e uses (seed, e), clustering uses it for
k-means. Re-running any phase with the same config reproduces it bit for bit,
which is also what makes resuming from a phase-1 checkpoint equivalent to an
uninterrupted run.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nets
from .bsgc import (GradientAccumulator, bsgc, gradient_similarity, load_assignment,
                   save_assignment, weight_similarity, SOURCE_GRADIENT, SOURCE_WEIGHT)
from .data import (Dataset, load_cifar10_bin, load_mnist_idx, synthetic_cifar,
                   synthetic_digits)
from .enmeshment import combined_loss, enmeshment, save_enmeshment_csv


class ConfigError(Exception):
    """Invalid or incomplete run configuration."""


@dataclass
class TrainConfig:
    arch: str = nets.ARCH_MLP_MNIST
    dataset: str = "synthetic"          # mnist | cifar10 | synthetic
    train_images: str = ""              # mnist IDX paths
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    cifar_train: list = field(default_factory=list)  # cifar binary batch paths
    cifar_test: list = field(default_factory=list)
    synthetic_train_per_class: int = 600
    synthetic_test_per_class: int = 100
    batch_size: int = 64
    lr: float = 1e-3
    lam: float = 20.0
    k: int = 4
    warmup_epochs: int = 1
    main_epochs: int = 10
    seed: int = 0
    clustered_layer: int = -1           # -1: penultimate linear layer
    similarity: str = SOURCE_WEIGHT

    def validate(self):
        if self.arch not in (nets.ARCH_MLP_MNIST, nets.ARCH_CNN_CIFAR):
            raise ConfigError(f"unknown arch {self.arch!r}")
        if self.dataset not in ("mnist", "cifar10", "synthetic"):
            raise ConfigError(f"unknown dataset {self.dataset!r}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.lam < 0:
            raise ConfigError("lambda must be >= 0")
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if self.warmup_epochs < 0 or self.main_epochs < 0:
            raise ConfigError("epoch counts must be >= 0")
        if self.similarity not in (SOURCE_WEIGHT, SOURCE_GRADIENT):
            raise ConfigError(f"similarity must be '{SOURCE_WEIGHT}' or '{SOURCE_GRADIENT}'")
        return self

    def resolve_clustered_layer(self, net) -> int:
        if self.clustered_layer < 0:
            return net.linear_indices()[-2]
        idx = self.clustered_layer
        if idx >= len(net.layers) or net.layers[idx].kind != "linear":
            raise ConfigError(f"clustered_layer {idx} is not a linear layer")
        return idx


def load_datasets(config: TrainConfig):
    """(train, test) per the config; structured error before any training."""
    if config.dataset == "mnist":
        for name in ("train_images", "train_labels", "test_images", "test_labels"):
            path = getattr(config, name)
            if not path:
                raise ConfigError(f"mnist dataset needs {name}")
            if not Path(path).exists():
                raise ConfigError(f"{name} file not found: {path}")
        train = load_mnist_idx(config.train_images, config.train_labels)
        test = load_mnist_idx(config.test_images, config.test_labels)
    elif config.dataset == "cifar10":
        if not config.cifar_train or not config.cifar_test:
            raise ConfigError("cifar10 dataset needs cifar_train and cifar_test paths")
        for path in list(config.cifar_train) + list(config.cifar_test):
            if not Path(path).exists():
                raise ConfigError(f"cifar batch file not found: {path}")
        train = load_cifar10_bin(config.cifar_train)
        test = load_cifar10_bin(config.cifar_test)
    else:
        if config.arch == nets.ARCH_MLP_MNIST:
            train = synthetic_digits([config.seed, 11], config.synthetic_train_per_class)
            test = synthetic_digits([config.seed, 12], config.synthetic_test_per_class)
        else:
            train = synthetic_cifar([config.seed, 11], config.synthetic_train_per_class)
            test = synthetic_cifar([config.seed, 12], config.synthetic_test_per_class)
    return train, test


@dataclass
class EpochStats:
    epoch: int
    phase: str             # "warmup" | "main"
    loss: float            # mean total loss over the epoch's batches
    test_accuracy: float
    enmeshment: float | None = None  # None while no cluster assignment exists


@dataclass
class RunRecord:
    epochs: list
    artifacts: dict
    config: TrainConfig

    def final_enmeshment(self):
        values = [s.enmeshment for s in self.epochs if s.enmeshment is not None]
        return values[-1] if values else None

    def final_accuracy(self):
        return self.epochs[-1].test_accuracy if self.epochs else None


def _train_epoch(net, adam, train: Dataset, config: TrainConfig, epoch: int,
                 assignment=None, accumulator=None, layer_index=None):
    perm = np.random.default_rng([config.seed, epoch]).permutation(len(train))
    total = 0.0
    batches = 0
    for lo in range(0, len(train), config.batch_size):
        idx = perm[lo:lo + config.batch_size]
        x, y = train.inputs[idx], train.labels[idx]
        if assignment is None or config.lam == 0.0:
            trace = nets.forward(net, x)
            loss = nets.backward(net, trace, y)
        else:
            loss = combined_loss(net, x, y, assignment, config.lam).total
        if accumulator is not None:
            accumulator.record(net.layers[layer_index].grad)
        adam.step(net)
        total += loss
        batches += 1
    return total / max(batches, 1)


def run_phase1(config: TrainConfig, train: Dataset, test: Dataset):
    """Warmup training on plain cross-entropy while recording the designated
    layer's absolute gradients for the gradient-based similarity."""
    from .evaluation import accuracy

    config.validate()
    net = nets.build_network(config.arch, config.seed)
    layer_index = config.resolve_clustered_layer(net)
    accumulator = GradientAccumulator(net.layers[layer_index].weight.shape)
    adam = nets.Adam(net, lr=config.lr)
    stats = []
    for epoch in range(config.warmup_epochs):
        loss = _train_epoch(net, adam, train, config, epoch,
                            accumulator=accumulator, layer_index=layer_index)
        stats.append(EpochStats(epoch, "warmup", loss, accuracy(net, test)))
    return net, accumulator, stats


def build_assignment(config: TrainConfig, net, accumulator=None):
    layer_index = config.resolve_clustered_layer(net)
    if config.similarity == SOURCE_WEIGHT:
        sim = weight_similarity(net.layers[layer_index].weight.T)
    else:
        if accumulator is None:
            raise ValueError("gradient similarity requested but no accumulator given")
        sim = gradient_similarity(accumulator)
    return bsgc(sim, config.k, config.seed, layer_index=layer_index)


def run_phase2(net, assignment, config: TrainConfig, train: Dataset, test: Dataset):
    """Main training on L_CE + lambda * L_E with the assignment frozen."""
    from .evaluation import accuracy

    config.validate()
    layer = net.layers[assignment.layer_index]
    adam = nets.Adam(net, lr=config.lr)
    stats = []
    for offset in range(config.main_epochs):
        epoch = config.warmup_epochs + offset
        loss = _train_epoch(net, adam, train, config, epoch, assignment=assignment)
        e = enmeshment(layer.weight.T, assignment).e
        stats.append(EpochStats(epoch, "main", loss, accuracy(net, test), e))
    return net, stats


def _stats_to_csv(stats, path):
    lines = ["epoch,phase,loss,test_accuracy,enmeshment"]
    for s in stats:
        e = "" if s.enmeshment is None else f"{s.enmeshment:.12g}"
        lines.append(f"{s.epoch},{s.phase},{s.loss:.12g},{s.test_accuracy:.12g},{e}")
    Path(path).write_text("\n".join(lines) + "\n")


def _stats_from_csv(path):
    stats = []
    for line in Path(path).read_text().splitlines()[1:]:
        epoch, phase, loss, acc, e = line.split(",")
        stats.append(EpochStats(int(epoch), phase, float(loss), float(acc),
                                float(e) if e else None))
    return stats


def config_snapshot(config: TrainConfig) -> str:
    return json.dumps(dataclasses.asdict(config), indent=2, sort_keys=True)


def run_full(config: TrainConfig, out_dir, resume: bool = False) -> RunRecord:
    """The whole pipeline plus the evaluation suite, every artifact on disk.

    With resume=True, a phase-1 checkpoint and assignment left in out_dir by
    an interrupted run (with an identical config snapshot) are reused instead
    of recomputed; the final parameters match the uninterrupted run exactly.
    """
    from . import figures
    from .evaluation import ablation_report, circuit_report, save_ablation_csv, save_circuit_csv

    config.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    artifacts = {}

    snapshot = config_snapshot(config)
    config_path = out / "config.json"
    phase1_ckpt = out / "checkpoint_phase1.npz"
    assignment_path = out / "assignment.txt"
    phase1_record = out / "record_phase1.csv"

    train, test = load_datasets(config)

    can_resume = (resume and config_path.exists()
                  and config_path.read_text() == snapshot
                  and phase1_ckpt.exists() and assignment_path.exists()
                  and phase1_record.exists())
    if can_resume:
        net, _ = nets.load_checkpoint(phase1_ckpt)
        assignment = load_assignment(assignment_path)
        stats1 = _stats_from_csv(phase1_record)
    else:
        config_path.write_text(snapshot)
        net, accumulator, stats1 = run_phase1(config, train, test)
        nets.save_checkpoint(net, phase1_ckpt, config.seed)
        assignment = build_assignment(config, net, accumulator)
        save_assignment(assignment, assignment_path)
        _stats_to_csv(stats1, phase1_record)
    artifacts["config"] = str(config_path)
    artifacts["checkpoint_phase1"] = str(phase1_ckpt)
    artifacts["assignment"] = str(assignment_path)
    artifacts["record_phase1"] = str(phase1_record)

    net, stats2 = run_phase2(net, assignment, config, train, test)
    final_ckpt = out / "checkpoint_final.npz"
    nets.save_checkpoint(net, final_ckpt, config.seed)
    artifacts["checkpoint_final"] = str(final_ckpt)

    stats = stats1 + stats2
    record_path = out / "record.csv"
    _stats_to_csv(stats, record_path)
    artifacts["record"] = str(record_path)

    layer = net.layers[assignment.layer_index]
    report = enmeshment(layer.weight.T, assignment)
    enmesh_path = out / "enmeshment.csv"
    save_enmeshment_csv(report, enmesh_path)
    artifacts["enmeshment"] = str(enmesh_path)

    ablation = ablation_report(net, assignment, test)
    ablation_csv = out / "ablation.csv"
    save_ablation_csv(ablation, ablation_csv)
    artifacts["ablation"] = str(ablation_csv)
    heatmap_path = out / "ablation.png"
    figures.ablation_heatmap(ablation, heatmap_path)
    artifacts["ablation_figure"] = str(heatmap_path)

    circuits = circuit_report(net, test, model_tag="clustered")
    ecs_path = out / "ecs.csv"
    save_circuit_csv([circuits], ecs_path)
    artifacts["ecs"] = str(ecs_path)

    weights_path = out / "clustered_layer.png"
    figures.weight_matrix_figure(layer.weight.T, assignment, weights_path)
    artifacts["weights_figure"] = str(weights_path)

    curves_path = out / "curves.png"
    figures.training_curves(stats, curves_path)
    artifacts["curves_figure"] = str(curves_path)

    summary_path = out / "summary.txt"
    final_e = report.e
    summary = [
        f"architecture: {config.arch}",
        f"dataset: {config.dataset}",
        f"epochs: {config.warmup_epochs} warmup + {config.main_epochs} main",
        f"lambda: {config.lam}  k: {config.k}  seed: {config.seed}",
        f"clustered layer index: {assignment.layer_index}",
        f"final enmeshment: {final_e:.4f}",
        f"final test accuracy: {stats[-1].test_accuracy:.4f}" if stats else "no epochs",
        "artifacts:",
    ] + [f"  {name}: {path}" for name, path in sorted(artifacts.items())]
    summary_path.write_text("\n".join(summary) + "\n")
    artifacts["summary"] = str(summary_path)

    record = RunRecord(stats, artifacts, config)
    manifest = {
        "tool_version": __import__("modnet").__version__,
        "seed": config.seed,
        "config": json.loads(snapshot),
        "artifacts": artifacts,
    }
    manifest_path = out / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    record.artifacts["manifest"] = str(manifest_path)
    return record
