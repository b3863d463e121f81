"""modnet: train small networks to be modular and measure what that buys.

A layer is split into bipartite spectral clusters, training then penalizes
weight mass that crosses cluster boundaries, and the result is scored by
cluster-ablation accuracy and by the effective circuit size under guarded
magnitude pruning.
"""

__version__ = "0.1.0"

from .bsgc import (ClusterAssignment, GradientAccumulator, SimilarityMatrix,
                   bsgc, gradient_similarity, kmeans, normalize, svd_topk,
                   weight_similarity)
from .data import Dataset, load_cifar10_bin, load_mnist_idx, synthetic_blobs
from .enmeshment import EnmeshmentReport, LossBreakdown, combined_loss, enmeshment, enmeshment_loss
from .evaluation import (AblationReport, CircuitReport, ablate_forward,
                         ablation_report, circuit_report, classwise_accuracy,
                         ecs_compare, effective_circuit_size)
from .nets import Adam, Network, backward, build_network, forward, load_checkpoint, save_checkpoint
from .pipeline import RunRecord, TrainConfig, run_full, run_phase1, run_phase2
