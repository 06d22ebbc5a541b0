"""Reliability-guided clustering: reference-anchored k-means (optionally
capacity-balanced), paired-classifier discrepancy training, and the
agreement-based reliability split into reliable clusters and unreliable
instances.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import grad
from .grad import Node, ParamSet, backward, constant, sgd_step
from .nets import ClassifierPair, NetworkBundle

CE_FLOOR = 1e-12


class ClusteringError(Exception):
    pass


@dataclass
class Partition:
    """Cluster assignments over n samples with k free prototypes plus the
    fixed reference prototype in row `reference_index` (= k, never updated).
    """

    assignments: np.ndarray  # (n,) int in [0, k]
    prototypes: np.ndarray  # (k+1, D)
    reference_index: int
    k: int
    reliability: np.ndarray | None = None  # (n,) bool, set after filtering
    objective: float = np.nan
    objective_trace: list = field(default_factory=list)
    n_iterations: int = 0

    def pseudo_labels(self) -> np.ndarray:
        return self.assignments.copy()

    def cluster_sizes(self) -> np.ndarray:
        return np.bincount(self.assignments, minlength=self.k + 1)


def transform_features(samples: np.ndarray, epoch: int, encoder: NetworkBundle | None) -> np.ndarray:
    """Identity on the first training round, encoder embeddings afterwards."""
    if epoch < 1:
        raise ClusteringError("epoch must be >= 1")
    if epoch == 1:
        return np.asarray(samples, dtype=np.float64)
    if encoder is None:
        raise ClusteringError("an encoder is required after the first round")
    return encoder.encode_np(np.asarray(samples, dtype=np.float64))


def _sq_distances(features: np.ndarray, prototypes: np.ndarray) -> np.ndarray:
    # (n, k+1) squared euclidean distances
    diff = features[:, None, :] - prototypes[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def _kmeanspp_free_prototypes(features, ref_feature, k, rng):
    """Seed k free prototypes by squared-distance-weighted sampling, with the
    fixed reference prototype already counted as a center."""
    centers = [ref_feature]
    d2 = np.sum((features - ref_feature) ** 2, axis=1)
    protos = []
    for _ in range(k):
        total = d2.sum()
        if total <= 0:
            idx = int(rng.integers(0, features.shape[0]))
        else:
            idx = int(rng.choice(features.shape[0], p=d2 / total))
        protos.append(features[idx].copy())
        centers.append(features[idx])
        d2 = np.minimum(d2, np.sum((features - features[idx]) ** 2, axis=1))
    return np.array(protos)


def _balanced_capacities(n: int, n_clusters: int) -> np.ndarray:
    base = n // n_clusters
    caps = np.full(n_clusters, base, dtype=np.int64)
    caps[: n % n_clusters] += 1
    return caps


def _greedy_balanced_assign(dist2: np.ndarray, capacities: np.ndarray) -> np.ndarray:
    """Lowest-cost-first assignment under exact per-cluster capacities.

    Capacities sum to n, so every cluster fills exactly to capacity; free
    cluster sizes therefore differ by at most one.
    """
    n, m = dist2.shape
    order = np.argsort(dist2, axis=None, kind="stable")
    assignments = np.full(n, -1, dtype=np.int64)
    remaining = capacities.copy()
    assigned = 0
    for flat in order:
        i, j = divmod(int(flat), m)
        if assignments[i] >= 0 or remaining[j] == 0:
            continue
        assignments[i] = j
        remaining[j] -= 1
        assigned += 1
        if assigned == n:
            break
    return assignments


def _hartigan_refine(features, prototypes, assignments, k, max_moves):
    """Single-point relocation passes after Lloyd convergence.

    Moves one sample at a time to whichever cluster lowers the objective the
    most, updating free-cluster means exactly; the fixed reference row never
    moves. Each move strictly decreases the objective. Returns the list of
    post-move objective values.
    """
    n = features.shape[0]
    counts = np.bincount(assignments, minlength=k + 1).astype(np.int64)
    sums = np.zeros((k, features.shape[1]))
    for j in range(k):
        members = assignments == j
        if members.any():
            sums[j] = features[members].sum(axis=0)
    trace = []
    idx = np.arange(n)
    for _ in range(max_moves):
        d2 = _sq_distances(features, prototypes)
        own = d2[idx, assignments]
        n_src = counts[assignments]
        removal = np.where(
            assignments == k,
            own,
            np.where(n_src > 1, n_src / np.maximum(n_src - 1, 1) * own, 0.0),
        )
        addition = np.empty_like(d2)
        for j in range(k):
            addition[:, j] = (counts[j] / (counts[j] + 1)) * d2[:, j] if counts[j] else 0.0
        addition[:, k] = d2[:, k]
        gain = removal[:, None] - addition
        gain[idx, assignments] = -np.inf
        i, j = np.unravel_index(np.argmax(gain), gain.shape)
        if gain[i, j] <= 1e-12:
            break
        src = assignments[i]
        if src < k:
            counts[src] -= 1
            sums[src] -= features[i]
            if counts[src]:
                prototypes[src] = sums[src] / counts[src]
        else:
            counts[k] -= 1
        if j < k:
            counts[j] += 1
            sums[j] += features[i]
            prototypes[j] = sums[j] / counts[j]
        else:
            counts[k] += 1
        assignments[i] = j
        trace.append(float(_sq_distances(features, prototypes)[idx, assignments].sum()))
    return trace


def cluster_with_reference(
    features: np.ndarray,
    ref_feature: np.ndarray,
    k: int,
    balanced: bool = False,
    seed: int = 0,
    n_init: int = 8,
    max_iter: int = 100,
) -> Partition:
    """Lloyd alternation over k free prototypes plus one fixed reference row.

    The reference row never moves. Unbalanced mode assigns each sample to its
    nearest prototype; balanced mode enforces near-equal cluster sizes by
    greedy lowest-cost-first assignment under exact capacities.
    """
    features = np.asarray(features, dtype=np.float64)
    ref_feature = np.asarray(ref_feature, dtype=np.float64)
    if k < 1:
        raise ClusteringError("k must be >= 1")
    if features.ndim != 2 or features.shape[1] != ref_feature.shape[0]:
        raise ClusteringError("feature dimension does not match reference feature")
    n = features.shape[0]
    if n < k + 1:
        raise ClusteringError(f"need at least k+1={k + 1} samples, got {n}")
    if not np.isfinite(features).all() or not np.isfinite(ref_feature).all():
        raise ClusteringError("non-finite features")

    capacities = _balanced_capacities(n, k + 1) if balanced else None
    best = None
    for init_idx in range(n_init):
        rng = np.random.default_rng([seed, init_idx])
        free = _kmeanspp_free_prototypes(features, ref_feature, k, rng)
        prototypes = np.vstack([free, ref_feature[None, :]])
        assignments = np.full(n, -1, dtype=np.int64)
        trace = []
        iterations = 0
        for _ in range(max_iter):
            iterations += 1
            dist2 = _sq_distances(features, prototypes)
            if balanced:
                new_assign = _greedy_balanced_assign(dist2, capacities)
            else:
                new_assign = np.argmin(dist2, axis=1)
                # the anchored reference wins exact distance ties
                ref_tied = dist2[:, k] == dist2[np.arange(n), new_assign]
                new_assign[ref_tied] = k
            trace.append(float(dist2[np.arange(n), new_assign].sum()))
            if np.array_equal(new_assign, assignments):
                break
            assignments = new_assign
            for j in range(k):  # reference row (index k) is never updated
                members = assignments == j
                if members.any():
                    prototypes[j] = features[members].mean(axis=0)
        if not balanced:
            trace.extend(
                _hartigan_refine(features, prototypes, assignments, k, max_moves=min(2 * n, 300))
            )
        objective = trace[-1]
        if best is None or objective < best.objective - 1e-12:
            best = Partition(
                assignments=assignments,
                prototypes=prototypes,
                reference_index=k,
                k=k,
                objective=objective,
                objective_trace=trace,
                n_iterations=iterations,
            )
    return best


def clustering_objective(features, prototypes, assignments) -> float:
    diff = features - prototypes[assignments]
    return float(np.einsum("nd,nd->", diff, diff))


def reference_anchored_objective(
    features: Node, ref_feature: Node, free_prototypes: Node, assignments: np.ndarray
) -> Node:
    """Graph form of the clustering objective for fixed assignments:
    sum_i ||h_i - prototype(a_i)||^2 with the reference feature behind a
    stop-gradient, so it acts as a constant during any optimization."""
    assignments = np.asarray(assignments)
    n = assignments.shape[0]
    k = free_prototypes.values.shape[0]
    onehot_free = np.zeros((n, k))
    in_free = assignments < k
    onehot_free[np.nonzero(in_free)[0], assignments[in_free]] = 1.0
    ref_mask = (~in_free).astype(np.float64)[:, None]
    ref_row = grad.stop_gradient(ref_feature)
    targets = grad.add(
        grad.matmul(constant(onehot_free), free_prototypes),
        grad.mul(constant(ref_mask), ref_row),
    )
    diff = grad.sub(features, targets)
    return grad.sum_(grad.mul(diff, diff))


# ---------------------------------------------------------------------------
# Cross-entropy and the classifier discrepancy objective


def cross_entropy(m: np.ndarray, n: np.ndarray) -> float:
    """Conventional cross-entropy -sum(m * log(n)), n floored at 1e-12."""
    m = np.asarray(m, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    if m.shape != n.shape:
        raise ClusteringError("distribution length mismatch")
    for dist in (m, n):
        if abs(dist.sum() - 1.0) > 1e-9:
            raise ClusteringError("inputs must sum to 1")
    return float(-np.sum(m * np.log(np.maximum(n, CE_FLOOR))))


def cross_entropy_node(m: Node, n: Node) -> Node:
    """Graph version, batched over rows: returns per-row CE values."""
    logs = grad.log(grad.clamp_min(n, CE_FLOOR))
    axis = 1 if m.values.ndim == 2 else None
    return grad.neg(grad.sum_(grad.mul(m, logs), axis=axis))


def discrepancy_objective(
    pair: ClassifierPair, features_node: Node, onehot_node: Node
) -> Node:
    """Sum over samples of CE(q1,q2) + CE(q2,q1) - CE(Y,q1) - CE(Y,q2)."""
    q1 = grad.softmax(pair.logits(1, features_node), axis=1)
    q2 = grad.softmax(pair.logits(2, features_node), axis=1)
    mutual = grad.add(cross_entropy_node(q1, q2), cross_entropy_node(q2, q1))
    fit = grad.add(cross_entropy_node(onehot_node, q1), cross_entropy_node(onehot_node, q2))
    return grad.sum_(grad.sub(mutual, fit))


def one_hot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ClusteringError(f"label out of range [0, {n_classes - 1}]")
    out = np.zeros((labels.shape[0], n_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def train_discrepancy_classifiers(
    features: np.ndarray,
    pseudo_labels: np.ndarray,
    pair: ClassifierPair,
    steps: int = 200,
    lr: float = 1e-3,
) -> ClassifierPair:
    """Gradient ascent on the summed discrepancy objective.

    Steps use the per-sample-normalized gradient (lr is divided by n) so the
    rate transfers across dataset sizes; the objective is unbounded above, so
    the step budget is the only brake and small rates keep the trajectory in
    the fit-then-diverge regime where label consistency survives. Per-step
    objective values land in pair.objective_trace (last entry = final value).
    """
    features = np.asarray(features, dtype=np.float64)
    n = features.shape[0]
    onehot = one_hot(pseudo_labels, pair.n_classes)
    x_node = constant(features)
    y_node = constant(onehot)
    pair.objective_trace = []
    for _ in range(steps):
        pair.params1.zero_grads()
        pair.params2.zero_grads()
        objective = discrepancy_objective(pair, x_node, y_node)
        pair.objective_trace.append(float(objective.values))
        backward(grad.neg(objective))  # ascend
        sgd_step(pair.params1, lr / n)
        sgd_step(pair.params2, lr / n)
    final = discrepancy_objective(pair, x_node, y_node)
    pair.objective_trace.append(float(final.values))
    return pair


def reliability_filter(features: np.ndarray, pair: ClassifierPair) -> np.ndarray:
    """Flag i reliable iff both classifiers share the argmax class (ties
    break to the lowest index in both, so identical outputs always agree)."""
    features = np.asarray(features, dtype=np.float64)
    c1 = np.argmax(pair.logits_np(1, features), axis=1)
    c2 = np.argmax(pair.logits_np(2, features), axis=1)
    return c1 == c2


@dataclass
class RefinedSplit:
    """Reliable clusters (index arrays) plus the unreliable remainder."""

    reliable_clusters: list  # list of np.ndarray of sample indices
    cluster_ids: list  # original cluster index per reliable cluster
    unreliable: np.ndarray  # sample indices

    @property
    def t(self) -> int:
        return len(self.reliable_clusters)


def refine_partition(
    partition: Partition, flags: np.ndarray, min_cluster_size: int = 2
) -> RefinedSplit:
    """Group reliable samples by cluster; clusters left with fewer than
    min_cluster_size reliable members dissolve into the unreliable pool."""
    flags = np.asarray(flags, dtype=bool)
    n = partition.assignments.shape[0]
    if flags.shape[0] != n:
        raise ClusteringError("reliability flags length mismatch")
    partition.reliability = flags.copy()
    reliable_clusters, cluster_ids = [], []
    unreliable = [np.nonzero(~flags)[0]]
    for c in range(partition.k + 1):
        members = np.nonzero((partition.assignments == c) & flags)[0]
        if members.size == 0:
            continue
        if members.size < min_cluster_size:
            unreliable.append(members)
        else:
            reliable_clusters.append(members)
            cluster_ids.append(c)
    return RefinedSplit(
        reliable_clusters=reliable_clusters,
        cluster_ids=cluster_ids,
        unreliable=np.sort(np.concatenate(unreliable)),
    )


def export_partition_csv(partition: Partition, path) -> None:
    if partition.reliability is None:
        raise ClusteringError("partition has no reliability flags yet")
    lines = ["pixel_index,cluster,reliable"]
    for i, (c, r) in enumerate(zip(partition.assignments, partition.reliability)):
        lines.append(f"{i},{int(c)},{int(r)}")
    Path(path).write_text("\n".join(lines) + "\n")
