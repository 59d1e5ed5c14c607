"""Balanced k-means over FFN hidden neurons and the expert split it induces.

Neurons are clustered by their input-weight rows (W1 columns transposed; the
gate path Wg for gated FFNs).  Every cluster gets exactly hidden/n neurons:
each Lloyd iteration solves an exact points-to-slots assignment (Hungarian
method over cluster slots), and a final swap-refinement pass exchanges pairs
of points across clusters until no single swap lowers the objective.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .autodiff import ACTIVATIONS
from .errors import InputError, ValidationError
from .models import FfnWeights

_SWAP_TOL = 1e-9


@dataclass
class ExpertPartition:
    """Balanced assignment of hidden neurons to experts.  Expert index lists
    are sorted ascending, so a single expert covering everything reproduces
    the original neuron order exactly."""

    layer: int
    n_experts: int
    expert_size: int
    assignment: np.ndarray
    expert_indices: list[np.ndarray]

    @classmethod
    def from_assignment(cls, layer: int, assignment: np.ndarray, n_experts: int) -> "ExpertPartition":
        assignment = np.asarray(assignment, dtype=np.int64)
        n = assignment.size
        if n_experts < 1 or n % n_experts:
            raise InputError(f"n_experts={n_experts} must divide hidden dim {n}")
        size = n // n_experts
        indices = []
        for e in range(n_experts):
            idx = np.flatnonzero(assignment == e)
            if idx.size != size:
                raise InputError(f"expert {e} has {idx.size} neurons, expected {size}")
            indices.append(idx)
        return cls(layer=layer, n_experts=n_experts, expert_size=size,
                   assignment=assignment, expert_indices=indices)


@dataclass
class ExpertSlices:
    """Per-expert weight slices plus the shared output bias, which is applied
    once after summing expert outputs (never sliced)."""

    kind: str
    W1: list[np.ndarray]
    b1: list[np.ndarray]
    W2: list[np.ndarray]
    b2: np.ndarray
    Wg: list[np.ndarray] | None = None


def _objective(points: np.ndarray, centroids: np.ndarray, assignment: np.ndarray) -> float:
    d = points - centroids[assignment]
    return float((d * d).sum())


def _kmeanspp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centroids = np.empty((k, points.shape[1]), dtype=points.dtype)
    centroids[0] = points[rng.integers(n)]
    d2 = ((points - centroids[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0:
            centroids[i] = points[rng.integers(n)]
            continue
        centroids[i] = points[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, ((points - centroids[i]) ** 2).sum(axis=1))
    return centroids


def _balanced_assign(points: np.ndarray, centroids: np.ndarray, size: int) -> np.ndarray:
    # Exact balanced assignment: expand each centroid into `size` slots and
    # solve the square points x slots problem.
    cost = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    slot_cost = np.repeat(cost, size, axis=1)
    rows, cols = linear_sum_assignment(slot_cost)
    assignment = np.empty(points.shape[0], dtype=np.int64)
    assignment[rows] = cols // size
    return assignment


def _swap_refine(points: np.ndarray, assignment: np.ndarray, n_clusters: int,
                 size: int, max_swaps: int) -> np.ndarray:
    # Exchange delta for moving i<->j across clusters A=c(i), B=c(j):
    #   delta = -2 ((S_A - S_B) . (p_j - p_i) + ||p_j - p_i||^2) / size
    # where S_c is the coordinate sum of cluster c.  Negative delta improves.
    n = points.shape[0]
    gram = points @ points.T
    sq = np.einsum("ij,ij->i", points, points)
    sums = np.zeros((n_clusters, points.shape[1]), dtype=points.dtype)
    np.add.at(sums, assignment, points)
    for _ in range(max_swaps):
        a = assignment
        spa = (sums @ points.T)[a]  # spa[i, j] = S_{cluster(i)} . p_j
        diag = np.diag(spa)
        cross = (spa - diag[:, None]) + (spa - diag[:, None]).T  # (S_A - S_B).(p_j - p_i)
        dist2 = sq[:, None] + sq[None, :] - 2 * gram
        delta = -2.0 * (cross + dist2) / size
        delta[a[:, None] == a[None, :]] = np.inf
        i, j = np.unravel_index(np.argmin(delta), delta.shape)
        if delta[i, j] >= -_SWAP_TOL:
            break
        ca, cb = a[i], a[j]
        sums[ca] += points[j] - points[i]
        sums[cb] += points[i] - points[j]
        assignment[i], assignment[j] = cb, ca
    return assignment


def balanced_kmeans(
    points: np.ndarray,
    n_clusters: int,
    seed: int = 0,
    max_iters: int = 60,
    return_history: bool = False,
):
    """Cluster N points into n_clusters groups of exactly N/n_clusters.

    Returns the assignment vector, plus the per-iteration objective history
    when return_history is set.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise InputError(f"points must be 2-d, got shape {points.shape}")
    n = points.shape[0]
    if n_clusters < 1 or n_clusters > n:
        raise InputError(f"n_clusters must be in [1, {n}], got {n_clusters}")
    if n % n_clusters:
        raise InputError(f"n_clusters={n_clusters} must divide {n} points")
    if max_iters < 1:
        raise InputError(f"max_iters must be >= 1, got {max_iters}")
    size = n // n_clusters

    rng = np.random.default_rng(seed)
    centroids = _kmeanspp_init(points, n_clusters, rng)
    assignment = None
    history: list[float] = []
    for _ in range(max_iters):
        new_assignment = _balanced_assign(points, centroids, size)
        for c in range(n_clusters):
            centroids[c] = points[new_assignment == c].mean(axis=0)
        history.append(_objective(points, centroids, new_assignment))
        if assignment is not None and np.array_equal(new_assignment, assignment):
            break
        assignment = new_assignment

    assignment = _swap_refine(points, assignment, n_clusters, size, max_swaps=4 * n)
    for c in range(n_clusters):
        centroids[c] = points[assignment == c].mean(axis=0)
    history.append(_objective(points, centroids, assignment))
    return (assignment, history) if return_history else assignment


def neuron_features(ffn: FfnWeights) -> np.ndarray:
    """One row per hidden neuron: its input-weight vector (gate-path weights
    for gated FFNs, since the gate decides whether the neuron fires)."""
    w = ffn.Wg if ffn.kind == "gated" else ffn.W1
    return np.ascontiguousarray(w.T)


def slice_ffn(ffn: FfnWeights, partition: ExpertPartition) -> ExpertSlices:
    w1, b1, w2 = [], [], []
    wg = [] if ffn.Wg is not None else None
    for idx in partition.expert_indices:
        w1.append(np.ascontiguousarray(ffn.W1[:, idx]))
        b1.append(np.ascontiguousarray(ffn.b1[idx]))
        w2.append(np.ascontiguousarray(ffn.W2[idx, :]))
        if wg is not None:
            wg.append(np.ascontiguousarray(ffn.Wg[:, idx]))
    return ExpertSlices(kind=ffn.kind, W1=w1, b1=b1, W2=w2, b2=ffn.b2, Wg=wg)


def split_ffn(ffn: FfnWeights, n_experts: int, layer: int = 0, seed: int = 0,
              max_iters: int = 60) -> tuple[ExpertPartition, ExpertSlices]:
    """Cluster one FFN's neurons into n_experts balanced experts and slice
    its weights accordingly."""
    feats = neuron_features(ffn)
    assignment = balanced_kmeans(feats, n_experts, seed=seed, max_iters=max_iters)
    partition = ExpertPartition.from_assignment(layer, assignment, n_experts)
    return partition, slice_ffn(ffn, partition)


def dense_ffn_forward(ffn: FfnWeights, z: np.ndarray, activation: str) -> np.ndarray:
    act = ACTIVATIONS[activation]
    lin = z @ ffn.W1 + ffn.b1
    hidden = act(z @ ffn.Wg) * lin if ffn.kind == "gated" else act(lin)
    return hidden @ ffn.W2 + ffn.b2


def expert_outputs(slices: ExpertSlices, z: np.ndarray, activation: str) -> list[np.ndarray]:
    """Per-expert partial outputs, excluding the shared b2."""
    act = ACTIVATIONS[activation]
    outs = []
    for e in range(len(slices.W1)):
        lin = z @ slices.W1[e] + slices.b1[e]
        hidden = act(z @ slices.Wg[e]) * lin if slices.kind == "gated" else act(lin)
        outs.append(hidden @ slices.W2[e])
    return outs


def reconstruct_check(ffn: FfnWeights, slices: ExpertSlices, batch: np.ndarray,
                      activation: str) -> float:
    """Max absolute deviation between the dense FFN and the sum of all expert
    outputs plus b2, over a token batch."""
    if batch.ndim != 2 or batch.shape[1] != ffn.W1.shape[0]:
        raise ValidationError(f"batch shape {batch.shape} does not match input dim {ffn.W1.shape[0]}")
    dense = dense_ffn_forward(ffn, batch, activation)
    total = sum(expert_outputs(slices, batch, activation)) + slices.b2
    return float(np.abs(dense - total).max())
