"""Enmeshment: the fraction of a layer's absolute weight mass that stays
inside matched cluster pairs, and the differentiable training penalty built
from it.

All functions take the layer weight oriented input x output (m x n), i.e. the
transpose of what Linear stores. Mass sums use math.fsum, so a result is
identical to any other correctly-rounded summation of the same entries
regardless of accumulation order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .bsgc import ClusterAssignment

ZERO_MASS_EPS = 1e-12


@dataclass
class EnmeshmentReport:
    e: float            # trace(mass) / total_mass, in [0, 1]
    mass: np.ndarray    # k x k; mass[u][v] = sum |W_ij| over i in u, j in v
    total_mass: float


def enmeshment(weight_io: np.ndarray, assignment: ClusterAssignment) -> EnmeshmentReport:
    """Cluster-pair mass matrix and the enmeshment score E of a layer."""
    w = np.asarray(weight_io, dtype=np.float64)
    m, n = w.shape
    if len(assignment.u_labels) != m or len(assignment.v_labels) != n:
        raise ValueError(
            f"assignment sized {len(assignment.u_labels)}x{len(assignment.v_labels)} "
            f"does not fit a {m}x{n} weight matrix")
    abs_w = np.abs(w)
    total = math.fsum(abs_w.ravel())
    if total < ZERO_MASS_EPS:
        raise ValueError("layer weight mass is zero; enmeshment undefined")
    k = assignment.k
    mass = np.zeros((k, k))
    row_groups = [assignment.u_labels == u for u in range(k)]
    col_groups = [assignment.v_labels == v for v in range(k)]
    for u in range(k):
        block = abs_w[row_groups[u]]
        for v in range(k):
            mass[u, v] = math.fsum(block[:, col_groups[v]].ravel())
    e = math.fsum(mass[u, u] for u in range(k)) / total
    return EnmeshmentReport(e, mass, total)


def enmeshment_loss(weight_io: np.ndarray, assignment: ClusterAssignment):
    """Cross-cluster mass fraction L_E = 1 - E and its gradient w.r.t. W.

    With S the same-cluster mass and T the total mass, dL_E/dW_ij is
    sign(W_ij) * (E - [i,j same cluster]) / T; already-zero weights get
    subgradient 0 and stay put.
    """
    w = np.asarray(weight_io, dtype=np.float64)
    report = enmeshment(w, assignment)
    same = assignment.same_cluster_mask()
    grad = np.sign(w) * (report.e - same) / report.total_mass
    return 1.0 - report.e, grad


@dataclass
class LossBreakdown:
    l_ce: float
    l_e: float
    lam: float
    total: float


def combined_loss(net, batch, targets, assignment: ClusterAssignment,
                  lam: float) -> LossBreakdown:
    """One training step's losses: cross-entropy plus lam times the
    enmeshment penalty on the clustered layer.

    Runs forward/backward for the cross-entropy part, then adds the scaled
    enmeshment gradient into the clustered layer's grads. Only that one
    layer is penalized.
    """
    from . import nets

    if lam < 0:
        raise ValueError("clusterability coefficient must be >= 0")
    layer = net.layers[assignment.layer_index]
    if layer.kind != "linear":
        raise ValueError("only linear layers can be clustered")
    trace = nets.forward(net, batch)
    l_ce = nets.backward(net, trace, targets)
    if lam == 0.0:
        return LossBreakdown(l_ce, 0.0, 0.0, l_ce)
    l_e, grad_io = enmeshment_loss(layer.weight.T, assignment)
    layer.grad += lam * grad_io.T
    return LossBreakdown(l_ce, l_e, lam, l_ce + lam * l_e)


def save_enmeshment_csv(report: EnmeshmentReport, path) -> None:
    """CSV: the score, the total mass, then the k x k cluster-pair mass matrix."""
    k = report.mass.shape[0]
    lines = [f"e,{report.e:.12g}", f"total_mass,{report.total_mass:.12g}"]
    lines.append("u\\v," + ",".join(str(v) for v in range(k)))
    for u in range(k):
        lines.append(f"{u}," + ",".join(f"{report.mass[u, v]:.12g}" for v in range(k)))
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
