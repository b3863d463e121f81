"""Bipartite spectral clustering of one layer's input/output neurons.

The similarity matrix A is m x n with rows indexing the layer's input-side
neurons and columns its output-side neurons (the transpose of how Linear
stores its weight). Pipeline: degree-normalize A, take the top-k singular
triplets, k-means the rows of U and of V separately, then align the two label
sets so that u-cluster i and v-cluster i carry the most shared weight mass.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

ISOLATION_EPS = 1e-12
KMEANS_TOL = 1e-9
KMEANS_MAX_ITER = 300

SOURCE_WEIGHT = "weight"
SOURCE_GRADIENT = "gradient"


class DegenerateSimilarityError(Exception):
    """The similarity matrix carries no usable mass."""


@dataclass
class SimilarityMatrix:
    values: np.ndarray  # m x n, all entries >= 0
    source: str = SOURCE_WEIGHT

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError("similarity matrix must be 2-D")
        if (self.values < 0).any():
            raise ValueError("similarity matrix must be non-negative")


class GradientAccumulator:
    """Running sum of |gradient| for one layer's weight, recorded per step."""

    def __init__(self, shape):
        self.total = np.zeros(shape)
        self.steps = 0

    def record(self, grad: np.ndarray) -> None:
        if grad.shape != self.total.shape:
            raise ValueError(f"gradient shape {grad.shape} != {self.total.shape}")
        self.total += np.abs(grad)
        self.steps += 1


def weight_similarity(weight_io: np.ndarray) -> SimilarityMatrix:
    """Similarity from a layer's weights, already oriented input x output: |W|."""
    return SimilarityMatrix(np.abs(np.asarray(weight_io, dtype=np.float64)),
                            source=SOURCE_WEIGHT)


def gradient_similarity(acc: GradientAccumulator) -> SimilarityMatrix:
    """Mean absolute accumulated gradient; magnitudes add up, signs never cancel.

    The accumulator stores the layer's native out x in orientation, so the
    result is transposed into input x output.
    """
    if acc.steps < 1:
        raise ValueError("gradient accumulator has no recorded steps")
    return SimilarityMatrix((acc.total / acc.steps).T, source=SOURCE_GRADIENT)


@dataclass
class NormalizedSimilarity:
    matrix: np.ndarray
    isolated_rows: np.ndarray  # bool mask of rows whose sum fell below eps
    isolated_cols: np.ndarray


def normalize(a: np.ndarray) -> NormalizedSimilarity:
    """Two-sided degree normalization: A~ = D_U^{-1/2} A D_V^{-1/2}.

    Rows or columns with essentially zero mass get a unit degree instead and
    are flagged isolated; a matrix with no mass at all is an error.
    """
    a = np.asarray(a, dtype=np.float64)
    row_sums = a.sum(axis=1)
    col_sums = a.sum(axis=0)
    if a.size == 0 or a.sum() < ISOLATION_EPS:
        raise DegenerateSimilarityError("similarity matrix has no mass")
    isolated_rows = row_sums < ISOLATION_EPS
    isolated_cols = col_sums < ISOLATION_EPS
    du = np.where(isolated_rows, 1.0, row_sums)
    dv = np.where(isolated_cols, 1.0, col_sums)
    tilde = a / np.sqrt(du)[:, None] / np.sqrt(dv)[None, :]
    return NormalizedSimilarity(tilde, isolated_rows, isolated_cols)


def svd_topk(a: np.ndarray, k: int):
    """Top-k singular triplets (U m x k, S k, V n x k), values descending.

    Sign convention: the largest-magnitude entry of each left singular vector
    is made positive, so the decomposition is deterministic.
    """
    a = np.asarray(a, dtype=np.float64)
    m, n = a.shape
    if not 1 <= k <= min(m, n):
        raise ValueError(f"k={k} out of range for a {m}x{n} matrix")
    u, s, vt = np.linalg.svd(a, full_matrices=False)
    u, s, v = u[:, :k], s[:k], vt[:k].T
    for j in range(k):
        pivot = np.argmax(np.abs(u[:, j]))
        if u[pivot, j] < 0:
            u[:, j] = -u[:, j]
            v[:, j] = -v[:, j]
    return u, s, v


def kmeans(points: np.ndarray, k: int, seed) -> np.ndarray:
    """Seeded k-means++ followed by Lloyd iterations.

    Runs until the largest centroid shift drops below 1e-9 or 300 iterations.
    Empty clusters are repaired by stealing the point farthest from its
    assigned centroid, so all k clusters end non-empty.
    """
    points = np.asarray(points, dtype=np.float64)
    r = points.shape[0]
    if r < k:
        raise ValueError(f"need at least k={k} points, got {r}")
    rng = np.random.default_rng(seed)

    centroids = np.empty((k, points.shape[1]))
    centroids[0] = points[rng.integers(r)]
    d2 = ((points - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total < 1e-300:  # all points identical to chosen centroids
            centroids[j] = points[rng.integers(r)]
        else:
            centroids[j] = points[rng.choice(r, p=d2 / total)]
        d2 = np.minimum(d2, ((points - centroids[j]) ** 2).sum(axis=1))

    labels = np.zeros(r, dtype=np.int64)
    for _ in range(KMEANS_MAX_ITER):
        dists = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        labels = dists.argmin(axis=1)
        own = dists[np.arange(r), labels].copy()
        for j in range(k):
            if not (labels == j).any():
                farthest = int(np.argmax(own))
                labels[farthest] = j
                own[farthest] = -np.inf  # cannot be stolen twice in one pass
        new_centroids = centroids.copy()
        for j in range(k):
            members = labels == j
            if members.any():
                new_centroids[j] = points[members].mean(axis=0)
        shift = np.sqrt(((new_centroids - centroids) ** 2).sum(axis=1)).max()
        centroids = new_centroids
        if shift < KMEANS_TOL:
            break
    return labels


@dataclass
class ClusterAssignment:
    """Aligned bipartite clusters of one layer: u_labels over the m input-side
    neurons, v_labels over the n output-side neurons, with u-cluster i paired
    to v-cluster i."""

    k: int
    u_labels: np.ndarray
    v_labels: np.ndarray
    layer_index: int = -1

    def __post_init__(self):
        self.u_labels = np.asarray(self.u_labels, dtype=np.int64)
        self.v_labels = np.asarray(self.v_labels, dtype=np.int64)
        for name, lab in (("u", self.u_labels), ("v", self.v_labels)):
            if lab.size and (lab.min() < 0 or lab.max() >= self.k):
                raise ValueError(f"{name}-labels out of range [0, {self.k})")

    def same_cluster_mask(self) -> np.ndarray:
        """m x n boolean: entry (i, j) inside a matched cluster pair."""
        return self.u_labels[:, None] == self.v_labels[None, :]


def _align_labels(a, k, u_labels, v_labels):
    """Relabel the v side so v-cluster i carries the most mass with u-cluster i.

    Greedy on the cross-cluster mass matrix, largest entries first; ties break
    deterministically on the lower (u, v) index pair.
    """
    mass = np.zeros((k, k))
    for u in range(k):
        rows = u_labels == u
        if rows.any():
            sub = a[rows]
            for v in range(k):
                cols = v_labels == v
                if cols.any():
                    mass[u, v] = sub[:, cols].sum()
    order = sorted(((u, v) for u in range(k) for v in range(k)),
                   key=lambda uv: (-mass[uv[0], uv[1]], uv[0], uv[1]))
    perm = {}
    used_u = set()
    for u, v in order:
        if u not in used_u and v not in perm:
            perm[v] = u
            used_u.add(u)
    return np.array([perm[v] for v in v_labels], dtype=np.int64)


def bsgc(similarity, k: int, seed, layer_index: int = -1) -> ClusterAssignment:
    """Full bipartite spectral clustering of a similarity matrix.

    normalize -> top-k SVD -> k-means on the rows of U and of V -> greedy
    mass alignment of the two label sets. Isolated neurons (zero incident
    mass) are re-assigned afterwards to the cluster holding most of their
    incident weight, which for a fully zero row/column is cluster 0.
    """
    if isinstance(similarity, SimilarityMatrix):
        a = similarity.values
    else:
        a = SimilarityMatrix(similarity).values
    norm = normalize(a)
    u_vecs, _, v_vecs = svd_topk(norm.matrix, k)
    seed_seq = np.random.SeedSequence(seed)
    u_seed, v_seed = seed_seq.spawn(2)
    u_labels = kmeans(u_vecs, k, u_seed)
    v_labels = kmeans(v_vecs, k, v_seed)
    v_labels = _align_labels(a, k, u_labels, v_labels)

    for i in np.flatnonzero(norm.isolated_rows):
        incident = np.array([a[i, v_labels == c].sum() for c in range(k)])
        u_labels[i] = int(incident.argmax())
    for j in np.flatnonzero(norm.isolated_cols):
        incident = np.array([a[u_labels == c, j].sum() for c in range(k)])
        v_labels[j] = int(incident.argmax())

    return ClusterAssignment(k, u_labels, v_labels, layer_index)


def save_assignment(assignment: ClusterAssignment, path) -> None:
    """Text format: k and layer index, then one line per side of
    neuron:label pairs."""
    lines = [
        f"k {assignment.k}",
        f"layer {assignment.layer_index}",
        "u " + " ".join(f"{i}:{l}" for i, l in enumerate(assignment.u_labels)),
        "v " + " ".join(f"{j}:{l}" for j, l in enumerate(assignment.v_labels)),
    ]
    Path(path).write_text("\n".join(lines) + "\n")


def load_assignment(path) -> ClusterAssignment:
    try:
        lines = Path(path).read_text().splitlines()
        fields = dict(line.split(" ", 1) for line in lines if line.strip())
        k = int(fields["k"])
        layer_index = int(fields["layer"])
        labels = {}
        for side in ("u", "v"):
            pairs = [p.split(":") for p in fields[side].split()]
            arr = np.empty(len(pairs), dtype=np.int64)
            for idx, lab in pairs:
                arr[int(idx)] = int(lab)
            labels[side] = arr
    except (KeyError, ValueError, IndexError, OSError) as exc:
        raise ValueError(f"cannot parse cluster assignment {path}: {exc}") from exc
    return ClusterAssignment(k, labels["u"], labels["v"], layer_index)
