"""Interpretability measurements on a clustered model.

Two instruments: class-wise accuracy with one cluster switched ON (every
other cluster's neurons zero-ablated on both sides of the clustered layer)
or OFF (only that cluster's neurons zeroed), and Effective Circuit Size: the
fraction of non-zero weights left after iterative global magnitude pruning
guarded by per-label accuracy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nets
from .bsgc import ClusterAssignment
from .data import Dataset

MODE_ON = "on"
MODE_OFF = "off"

EVAL_BATCH = 512


def ablation_masks(net, assignment: ClusterAssignment, cluster_id: int, mode: str):
    """Trace-index -> multiplier vectors zeroing the deselected clusters.

    Both sides of the clustered layer are masked: the input-side neurons
    (activation feeding the layer) and the output-side neurons (its output).
    ON keeps only `cluster_id`; OFF removes exactly it; the two masks are
    complements.
    """
    if not 0 <= cluster_id < assignment.k:
        raise ValueError(f"cluster_id {cluster_id} out of range [0, {assignment.k})")
    if mode not in (MODE_ON, MODE_OFF):
        raise ValueError(f"mode must be '{MODE_ON}' or '{MODE_OFF}'")
    layer = net.layers[assignment.layer_index]
    if layer.kind != "linear" or layer.weight.shape != (
            len(assignment.v_labels), len(assignment.u_labels)):
        raise ValueError("assignment does not match the designated layer")
    if mode == MODE_ON:
        u_keep = assignment.u_labels == cluster_id
        v_keep = assignment.v_labels == cluster_id
    else:
        u_keep = assignment.u_labels != cluster_id
        v_keep = assignment.v_labels != cluster_id
    return {
        assignment.layer_index: u_keep.astype(np.float64),
        assignment.layer_index + 1: v_keep.astype(np.float64),
    }


def ablate_forward(net, assignment, cluster_id, mode, batch) -> np.ndarray:
    """Logits with the given cluster switched on or off."""
    masks = ablation_masks(net, assignment, cluster_id, mode)
    return nets.forward(net, batch, masks=masks).logits


def classwise_accuracy(net, dataset: Dataset, masks=None) -> np.ndarray:
    """Accuracy per true label over the dataset, optionally under masks."""
    correct = np.zeros(dataset.num_classes)
    seen = np.zeros(dataset.num_classes)
    for lo in range(0, len(dataset), EVAL_BATCH):
        batch = dataset.inputs[lo:lo + EVAL_BATCH]
        labels = dataset.labels[lo:lo + EVAL_BATCH]
        pred = nets.forward(net, batch, masks=masks).logits.argmax(axis=1)
        for c in range(dataset.num_classes):
            sel = labels == c
            seen[c] += sel.sum()
            correct[c] += (pred[sel] == c).sum()
    with np.errstate(invalid="ignore"):
        acc = np.where(seen > 0, correct / np.maximum(seen, 1), 0.0)
    return acc


def accuracy(net, dataset: Dataset, masks=None) -> float:
    per_label = classwise_accuracy(net, dataset, masks)
    counts = np.bincount(dataset.labels, minlength=dataset.num_classes)
    if counts.sum() == 0:
        return 0.0
    return float((per_label * counts).sum() / counts.sum())


@dataclass
class AblationReport:
    on: np.ndarray        # k x num_classes: accuracy with only cluster c active
    off: np.ndarray       # k x num_classes: accuracy with cluster c removed
    baseline: np.ndarray  # num_classes: unablated per-label accuracy


def ablation_report(net, assignment, dataset: Dataset) -> AblationReport:
    k, c = assignment.k, dataset.num_classes
    on = np.zeros((k, c))
    off = np.zeros((k, c))
    baseline = classwise_accuracy(net, dataset)
    for cluster in range(k):
        on[cluster] = classwise_accuracy(
            net, dataset, ablation_masks(net, assignment, cluster, MODE_ON))
        off[cluster] = classwise_accuracy(
            net, dataset, ablation_masks(net, assignment, cluster, MODE_OFF))
    return AblationReport(on, off, baseline)


def _all_weights(net):
    return [layer.weight for _, layer in net.param_layers()]


def _nonzero_fraction(net) -> float:
    weights = _all_weights(net)
    nnz = sum(int(np.count_nonzero(w)) for w in weights)
    total = sum(w.size for w in weights)
    return nnz / total


def _apply_prune(weights, flat_order, count):
    """Zero the `count` smallest-magnitude candidate positions; returns an undo list."""
    undo = []
    sizes = np.array([w.size for w in weights])
    bounds = np.cumsum(sizes)
    for pos in flat_order[:count]:
        layer_idx = int(np.searchsorted(bounds, pos, side="right"))
        offset = pos - (bounds[layer_idx - 1] if layer_idx else 0)
        w = weights[layer_idx].reshape(-1)
        undo.append((layer_idx, offset, w[offset]))
        w[offset] = 0.0
    return undo


def _revert(weights, undo):
    for layer_idx, offset, value in undo:
        weights[layer_idx].reshape(-1)[offset] = value


def effective_circuit_size(net, dataset: Dataset, label: int,
                           guard_delta: float = 0.02,
                           prune_fraction: float = 0.05,
                           return_pruned: bool = False):
    """Fraction of non-zero weights in the label's circuit.

    Rounds of global magnitude pruning: zero the prune_fraction of smallest
    remaining non-zero weights, re-check accuracy on the label's examples,
    and keep the round while accuracy stays above baseline - guard_delta.
    The first failing round is reverted and binary-searched (at least three
    refinement probes) for the largest prunable prefix, then pruning stops.
    """
    subset = dataset.subset(dataset.labels == label)
    if len(subset) == 0:
        raise ValueError(f"no examples with label {label}")
    chance = 1.0 / dataset.num_classes
    pruned = net.clone()
    weights = _all_weights(pruned)
    baseline = classwise_accuracy(pruned, subset)[label]
    if baseline < 2 * chance:
        raise ValueError(
            f"baseline accuracy {baseline:.3f} for label {label} is below "
            f"2x chance ({2 * chance:.3f}); circuit undefined")
    floor = baseline - guard_delta

    def label_accuracy():
        return classwise_accuracy(pruned, subset)[label]

    while True:
        flat = np.concatenate([w.ravel() for w in weights])
        remaining = np.flatnonzero(flat)
        if remaining.size == 0:
            break
        order = remaining[np.argsort(np.abs(flat[remaining]), kind="stable")]
        count = max(1, int(prune_fraction * remaining.size))
        undo = _apply_prune(weights, order, count)
        if label_accuracy() >= floor:
            continue
        _revert(weights, undo)
        # binary search for the largest feasible prefix; exact, and at least
        # three probes whenever the round held 8+ candidates
        lo, hi = 0, count - 1
        while lo < hi:
            mid = (lo + hi + 1) // 2
            undo = _apply_prune(weights, order, mid)
            ok = label_accuracy() >= floor
            _revert(weights, undo)
            if ok:
                lo = mid
            else:
                hi = mid - 1
        if lo > 0:
            _apply_prune(weights, order, lo)
        break

    ecs = _nonzero_fraction(pruned)
    if return_pruned:
        return ecs, pruned
    return ecs


@dataclass
class CircuitReport:
    ecs: dict       # label -> effective circuit size
    model_tag: str  # "clustered" | "unclustered"


def circuit_report(net, dataset: Dataset, labels=None, model_tag: str = "clustered",
                   guard_delta: float = 0.02, prune_fraction: float = 0.05) -> CircuitReport:
    if labels is None:
        labels = sorted(int(l) for l in np.unique(dataset.labels))
    ecs = {}
    for label in labels:
        ecs[int(label)] = effective_circuit_size(
            net, dataset, int(label), guard_delta, prune_fraction)
    return CircuitReport(ecs, model_tag)


def ecs_compare(clustered: CircuitReport, unclustered: CircuitReport):
    """Per-label and mean percent increase of the unclustered circuits over
    the clustered ones."""
    labels = sorted(set(clustered.ecs) & set(unclustered.ecs))
    if not labels:
        raise ValueError("reports share no labels")
    increase = {}
    for label in labels:
        c, u = clustered.ecs[label], unclustered.ecs[label]
        increase[label] = 100.0 * (u - c) / c
    mean = float(np.mean([increase[l] for l in labels]))
    return increase, mean


def save_ablation_csv(report: AblationReport, path) -> None:
    """Long format: mode,cluster,label,accuracy with baseline as cluster -1."""
    k, c = report.on.shape
    lines = ["mode,cluster,label,accuracy"]
    for label in range(c):
        lines.append(f"baseline,-1,{label},{report.baseline[label]:.12g}")
    for mode, table in (("on", report.on), ("off", report.off)):
        for cluster in range(k):
            for label in range(c):
                lines.append(f"{mode},{cluster},{label},{table[cluster, label]:.12g}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def save_circuit_csv(reports, path) -> None:
    lines = ["model,label,ecs"]
    for report in reports:
        for label in sorted(report.ecs):
            lines.append(f"{report.model_tag},{label},{report.ecs[label]:.12g}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def save_ecs_compare_csv(clustered: CircuitReport, unclustered: CircuitReport, path) -> None:
    increase, mean = ecs_compare(clustered, unclustered)
    lines = ["label,ecs_clustered,ecs_unclustered,percent_increase"]
    for label in sorted(increase):
        lines.append(f"{label},{clustered.ecs[label]:.12g},"
                     f"{unclustered.ecs[label]:.12g},{increase[label]:.12g}")
    lines.append(f"mean,,,{mean:.12g}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
